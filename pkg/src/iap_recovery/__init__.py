"""MRI IAP Recovery - predict image acquisition parameters from MR slices."""

from iap_recovery.__about__ import __version__

__all__ = ["__version__"]

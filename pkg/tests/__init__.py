"""Tests for MRI IAP Recovery."""

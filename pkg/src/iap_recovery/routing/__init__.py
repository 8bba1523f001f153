"""Domain routing of slices to downstream models by predicted IAPs."""

__all__ = []

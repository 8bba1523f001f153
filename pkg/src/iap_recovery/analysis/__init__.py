"""Evaluation metrics, reports and cohort statistics."""

__all__ = []

"""Core modules: IAP schema, predictor model, loss, training and checkpoints."""

__all__ = []

"""Scene flow decomposed into rigid ego-motion and non-rigid residual flow."""

__version__ = "0.1.0"

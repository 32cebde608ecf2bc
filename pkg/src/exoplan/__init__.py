"""Separated model-based offline planning on tabular exogenous block MDPs."""
__version__ = "0.1.0"

"""Mean-shift (mimetic) initialization for MLP blocks, with a small numpy training lab."""

__version__ = "0.1.0"

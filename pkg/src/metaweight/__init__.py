"""Online example reweighting with a one-step unrolled meta-gradient."""

__version__ = "0.1.0"

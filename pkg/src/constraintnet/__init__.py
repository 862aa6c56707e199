"""Neural networks whose outputs are confined to sample-specific constraint regions."""

__version__ = "0.1.0"

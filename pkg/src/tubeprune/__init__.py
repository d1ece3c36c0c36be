"""Privacy-preserving action recognition by pruning video tubelet tokens."""

__version__ = "0.1.0"

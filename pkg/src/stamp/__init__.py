"""Set-conditioned, meta-learned structured channel pruning at desk scale."""

__version__ = "0.1.0"

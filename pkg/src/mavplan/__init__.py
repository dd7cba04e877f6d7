"""Multi-action-value planning: protocol, oracles, search and league."""

__version__ = "0.1.0"

"""Flux/pressure pruning of small dense networks, with sweep analysis tools."""

__version__ = "0.1.0"

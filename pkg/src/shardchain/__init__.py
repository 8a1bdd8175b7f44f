"""Sharded permissioned blockchain over simulated trusted enclaves."""

__version__ = "0.1.0"

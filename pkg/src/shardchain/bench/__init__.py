"""Workloads, benchmark runner and verification oracles."""

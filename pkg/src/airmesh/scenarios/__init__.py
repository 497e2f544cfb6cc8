"""Bundled workload scenarios and their threshold files."""

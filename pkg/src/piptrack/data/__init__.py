"""Synthetic training scenes and on-disk sequence formats."""

"""Rigid-body contact simulation for tight-tolerance assembly tasks."""

__version__ = "0.1.0"

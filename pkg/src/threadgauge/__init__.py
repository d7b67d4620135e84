"""Directive-intensity scoring, reply classification and coupling inference
for agent conversation archives."""

__version__ = "0.1.0"

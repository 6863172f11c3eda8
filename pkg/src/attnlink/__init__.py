"""Transformer with attention links, in numpy."""

"""Reverse-mode differentiation and training of model pairs."""

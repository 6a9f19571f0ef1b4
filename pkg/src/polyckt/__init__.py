"""Toolkit for training and analyzing polynomial CNNs under mock HE cost semantics."""

__version__ = "0.1.0"

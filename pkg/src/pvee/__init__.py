"""Pharmacovigilance event extraction toolkit."""

__version__ = "0.1.0"

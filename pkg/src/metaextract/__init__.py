"""Structured data extraction and evaluation toolkit for trial reports."""

__version__ = "0.1.0"

"""Markowitz and worst-case robust long-only portfolio models."""

__version__ = "0.1.0"

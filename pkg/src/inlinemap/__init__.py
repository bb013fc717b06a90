"""Recover function inlining from debug info and evaluate inlining-simulation strategies."""

__version__ = "0.1.0"

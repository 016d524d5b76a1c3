"""Handlers package."""

from .commands import build_parser, run, HANDLERS

__all__ = ["build_parser", "run", "HANDLERS"]

"""Streaming cross-platform narrative emergence prediction over discourse networks."""

from __future__ import annotations

__version__ = "0.1.0"

"""Surrogate-based prevalence measurement for A/B experiments."""

from __future__ import annotations

__version__ = "0.1.0"

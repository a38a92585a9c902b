"""Asynchronous federated learning with increasing sample sizes and DP accounting."""

from __future__ import annotations

__version__ = "0.1.0"

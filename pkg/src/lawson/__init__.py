"""Numerical companion for multiple-layer Allen-Cahn solutions modelled on
the Lawson minimal cones."""
from __future__ import annotations

__version__ = "0.1.0"

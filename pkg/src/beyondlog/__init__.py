"""Desk-scale engine for knowledge-grounded item representations, beyond-log behaviour fill and dual-pathway CTR ranking."""
__version__ = "0.1.0"

"""Anchor-point grid detection of small objects in overhead imagery."""

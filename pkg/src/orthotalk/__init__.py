"""Talking-head animation through three mutually orthogonal motion spaces (mouth, pose, expression)."""

__version__ = "0.1.0"

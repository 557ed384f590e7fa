"""Spine decompositions of multitype continuous-state branching processes."""

__version__ = "0.3.0"

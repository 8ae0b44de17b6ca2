"""Ideal-flow planning, boundary-feedback recovery and leader-follower cluster tracking for UAS traffic in a finite airspace."""

__version__ = "0.1.0"

"""Energy-conditioned rigid-body flow matching on T^2 x SO(3)."""

__version__ = "0.1.0"

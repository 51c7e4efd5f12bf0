"""Geographic atrophy detection from color fundus photographs."""

__version__ = "0.1.0"

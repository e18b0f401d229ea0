"""Learning direction-aware terrain traversability from simulated locomotion."""

__version__ = "0.1.0"

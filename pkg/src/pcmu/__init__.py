"""Privacy-cost management for smart-meter loads with a rechargeable battery,
trained by deep double Q-learning against information-leakage rewards."""

__version__ = "0.1.0"

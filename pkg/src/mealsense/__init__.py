"""Two-stage wearable food-intake recognition from smartwatch and glasses IMUs."""

__version__ = "0.1.0"

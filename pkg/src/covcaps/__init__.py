"""Two-stage capsule-network classifier for chest CT (COVID-19 / CAP / normal)."""

__version__ = "0.1.0"

CLASS_NAMES = ("covid", "cap", "normal")

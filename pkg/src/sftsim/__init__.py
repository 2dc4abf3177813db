"""sftsim: planner and round-level simulator for split fine-tuning of
transformer models over wireless networks."""

__version__ = "0.1.0"

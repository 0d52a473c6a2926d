"""Intervention-aware hybrid neural ODEs with baselines, simulators and a training harness."""

__version__ = "0.1.0"

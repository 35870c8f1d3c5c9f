"""Spiking forward models and motor inference for modular trunk-like robot arms."""

__version__ = "0.1.0"

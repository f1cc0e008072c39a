"""Formulaic alpha discovery with an in-sample gate, plus aggregation,
backtesting and attribution of the promoted factor library."""

__version__ = "0.1.0"

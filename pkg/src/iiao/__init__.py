"""IIAO crowd counting: softmax-attention intermediate supervision and Regional Correlation Loss."""

__version__ = "0.1.0"

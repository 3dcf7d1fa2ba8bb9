"""Grid Universal Transformer for multi-digit, multi-operand addition."""

__version__ = "0.1.0"

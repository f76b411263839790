"""Volume classification with a per-slice CNN feeding an LSTM."""

__version__ = "0.1.0"

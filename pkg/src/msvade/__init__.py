"""Conv-VaDE EEG microstate pipeline."""

__version__ = "0.1.0"

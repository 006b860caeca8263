"""Pause-grounded contextual embeddings and a BiLSTM-CRF shallow parser."""

__version__ = "0.1.0"

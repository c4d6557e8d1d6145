"""Entity extraction from visually rich documents with edge-aware graph
convolution and BiLSTM-CRF tagging."""

__version__ = "0.1.0"

"""vqeeg: vector-quantized transformer pretraining for EEG-like signals."""

__version__ = "0.1.0"

"""Cross-lingual ASR transfer through speech translation pre-training."""

__version__ = "0.1.0"

"""Self-supervised vision transformers for chest-radiograph TB classification."""

__version__ = "0.1.0"

"""Progressive self-knowledge distillation on small dense classifiers."""

__version__ = "0.1.0"

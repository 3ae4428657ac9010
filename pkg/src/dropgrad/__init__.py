"""Training with sparsified activation caches (min-k / random dropping)."""

__version__ = "0.1.0"

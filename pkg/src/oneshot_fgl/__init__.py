"""One-shot personalised federated graph learning on numpy and scipy."""

__version__ = "0.1.0"

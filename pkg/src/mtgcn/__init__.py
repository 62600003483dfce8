"""Text graphs, a multi-task GCN autoencoder and random-walk baselines."""

__version__ = "0.1.0"

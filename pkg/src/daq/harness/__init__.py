"""Training harness: datasets, run configuration and the training loop."""

"""Teacher-student Bayesian optimization with pseudo-labeled unlabeled data."""

__version__ = "0.1.0"

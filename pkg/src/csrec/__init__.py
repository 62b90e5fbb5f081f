"""Matrix-factorization recommenders with characterized social regularization."""

__version__ = "0.1.0"

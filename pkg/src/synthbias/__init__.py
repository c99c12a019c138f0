"""Privacy-preserving categorical data synthesis and bias-retention evaluation."""

__version__ = "0.1.0"

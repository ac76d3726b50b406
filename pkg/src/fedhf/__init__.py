"""Federated tabular imputation over clients with partially overlapping feature schemas."""

__version__ = "0.1.0"

"""Household home-delivery frequency models: ordered probit, random forest and gradient boosting."""

__version__ = "0.1.0"

"""Gene co-expression prior knowledge for expression prediction heads."""

__version__ = "0.1.0"

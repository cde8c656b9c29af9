"""Direct sampling of regularized P functions from phase-continuous homodyne data."""

__version__ = "0.1.0"

"""Conservative surrogates for expensive constraints over active subspaces."""

__version__ = "0.1.0"

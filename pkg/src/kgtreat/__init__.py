"""Treatment-effect estimation from patient code sequences and personalized knowledge graphs."""

__version__ = "0.1.0"

"""Age- and trait-structured epidemic model with memory of the last infection."""
__version__ = "0.1.0"

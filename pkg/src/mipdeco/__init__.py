"""Mixed-integer PDE-constrained optimal control with balanced truncation and an improved penalty algorithm."""

__version__ = "0.1.0"

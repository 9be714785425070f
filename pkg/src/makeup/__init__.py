"""Transfer learning for sparse regression on an unlabeled, underrepresented subgroup."""

__version__ = "0.1.0"

"""Category-specific visual prompt tuning for open-world counting, on a
from-scratch numpy autodiff engine and a synthetic benchmark."""

__version__ = "0.1.0"

"""Low-rank + sparse two-headed convolutional multi-task learner.

A shared convolutional feature extractor feeds two parallel linear heads:
one regularized by the nuclear norm (low rank across tasks), one by the
l1 norm (feature selection), coupled by a consistency penalty and trained
by alternating subgradient / backpropagation steps.
"""

from lowrank_mtl.errors import (
    ConfigError,
    DataError,
    DimensionError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "NumericError",
]

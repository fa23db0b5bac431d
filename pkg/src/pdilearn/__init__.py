"""Learning probability dose intervals with doubly-robust surrogate risk minimisation."""

from .core import Dataset, HyperParams, IntervalRule, Observation, TaskSpec, validate_dataset
from .errors import PDIError

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "HyperParams",
    "IntervalRule",
    "Observation",
    "PDIError",
    "TaskSpec",
    "validate_dataset",
    "__version__",
]

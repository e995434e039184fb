"""Website-fingerprinting attack and defense workbench."""
from .features import FEATURE_NAMES, N_FEATURES, extract_features
from .trace import Dataset, Flow, Observation, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FEATURE_NAMES",
    "Flow",
    "N_FEATURES",
    "Observation",
    "extract_features",
    "load_dataset",
    "save_dataset",
]

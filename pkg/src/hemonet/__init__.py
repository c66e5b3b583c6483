"""Segmentation-dependent hemorrhage classification on synthetic head phantoms."""

__version__ = "0.1.0"

from .model import ArchConfig, Model, Predictions, blood_volume_feature, build_model
from .phantom import PhantomConfig, Study, apply_brain_window, generate_study
from .tensor import NumericalError, Tensor, backward
from .windows import SliceWindow, make_slice_windows

__all__ = [
    "ArchConfig",
    "Model",
    "NumericalError",
    "PhantomConfig",
    "Predictions",
    "SliceWindow",
    "Study",
    "Tensor",
    "apply_brain_window",
    "backward",
    "blood_volume_feature",
    "build_model",
    "generate_study",
    "make_slice_windows",
    "__version__",
]

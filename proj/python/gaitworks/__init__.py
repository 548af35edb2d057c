"""Gait energy images, the gait CNN, explanations and synthetic walkers."""

from ._gaitworks import (
    DataError,
    ImageIoError,
    Model,
    ModelFormatError,
    NoGaitCycleError,
    TrainingError,
    class_names,
    compute_gei,
    crop_normalize,
    cycle_geis,
    energy_size,
    lower_half_mass,
    make_folds,
    prepare_silhouettes,
    segment_video,
    synth_geis,
)

__all__ = [
    "DataError",
    "ImageIoError",
    "Model",
    "ModelFormatError",
    "NoGaitCycleError",
    "TrainingError",
    "class_names",
    "compute_gei",
    "crop_normalize",
    "cycle_geis",
    "energy_size",
    "lower_half_mass",
    "make_folds",
    "prepare_silhouettes",
    "segment_video",
    "synth_geis",
]

"""Tuning-free personalized generation with continuous attribute control, on a synthetic face world."""
from .errors import (
    AttrDiffError,
    ConfigurationError,
    DegenerateDirectionError,
    ProbeTrainingError,
    ScheduleMismatchError,
    TrainingAbort,
    UsageError,
    ValidationError,
)
from .latent_space import AttributeDirection, DirectionBank, apply_edit, extract_direction, sweep
from .tdca import ConditioningBundle, TDCABlock, attend, concat_decoupled_forward, tdca_forward

__version__ = "0.1.0"

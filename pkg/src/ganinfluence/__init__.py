"""Influence of training instances on GAN evaluation metrics, and data cleansing."""

from .errors import (AdjointBlewUp, ConfigError, DegenerateCovariance, DegenerateInput, Diverged,
                     DimensionMismatch, GanInfluenceError, MissingCheckpoint, NoConvergence,
                     NonFiniteValue, ScheduleMismatch, SpecMismatch)
from .models import Dataset, GameSpec

__version__ = "0.1.0"

"""Backbone decomposition toolkit for supercritical superprocesses with non-local branching."""

from .mechanism import (
    M0,
    DerivedConstants,
    LevyMeasure,
    Mechanism,
    derive_constants,
    eval_psi_bar,
    immigration_law,
    offspring_laws,
    subordinator_exponent,
)
from .model import Model
from .motion import DisplacementKernel, Grid, GridFunction, MotionSpec

__version__ = "0.1.0"

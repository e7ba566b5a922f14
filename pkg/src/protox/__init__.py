"""Prototype-based explanations for behaviour-cloned agents in a pixel corridor world."""

from __future__ import annotations

__version__ = "0.1.0"

from .corridor import ACTION_NAMES, Action, BadExpert, CorridorConfig, CorridorEnv, ScriptedExpert
from .demonstrations import DemonstrationDataset, State, Trajectory, collect, split
from .errors import (
    ConfigurationError,
    DataError,
    DependencyError,
    EvaluationError,
    FormatError,
    NumericError,
    ProtoXError,
    ShapeError,
    SplitError,
    StateError,
)
from .model import ProtoXModel, init_model, predict

__all__ = [
    "ACTION_NAMES",
    "Action",
    "BadExpert",
    "CorridorConfig",
    "CorridorEnv",
    "ScriptedExpert",
    "DemonstrationDataset",
    "State",
    "Trajectory",
    "collect",
    "split",
    "ConfigurationError",
    "DataError",
    "DependencyError",
    "EvaluationError",
    "FormatError",
    "NumericError",
    "ProtoXError",
    "ShapeError",
    "SplitError",
    "StateError",
    "ProtoXModel",
    "init_model",
    "predict",
]

from .config import ExperimentConfig, RuntimeSettings
from .graphical import Configuration, EventLog, RngStream, sample_events, sample_nu_p
from .graphical.lazy import LazyGraphicalRepresentation
from .martingale import DecompositionRecord, ExactGProvider, MCGProvider, decompose_path
from .observables import LocalFunction, XiRecord, accumulate_xi, occupation_function
from .runner import ExperimentRunner
from .statistics import EstimateCI, RatePoint
from .stirring import ResolventTable, StirringTuple, exact_beta, exact_G
from .tree import Ball, BallShape, EdgeAddr, VertexAddr, build_ball, truncation_radius
from .utils import CapExceededError

__all__ = [
    "Ball",
    "BallShape",
    "CapExceededError",
    "Configuration",
    "DecompositionRecord",
    "EdgeAddr",
    "EstimateCI",
    "EventLog",
    "ExactGProvider",
    "ExperimentConfig",
    "ExperimentRunner",
    "LazyGraphicalRepresentation",
    "LocalFunction",
    "MCGProvider",
    "RatePoint",
    "ResolventTable",
    "RngStream",
    "RuntimeSettings",
    "StirringTuple",
    "VertexAddr",
    "XiRecord",
    "accumulate_xi",
    "build_ball",
    "decompose_path",
    "exact_G",
    "exact_beta",
    "occupation_function",
    "sample_events",
    "sample_nu_p",
    "truncation_radius",
]

from .dynamics import (
    Configuration,
    evolve,
    evolve_windows,
    sample_nu_p,
    trace_dual,
    trace_dual_multi,
)
from .events import EventLog, PoissonEvent, sample_events, sample_events_windowed
from .rng import RngStream

__all__ = [
    "Configuration",
    "EventLog",
    "PoissonEvent",
    "RngStream",
    "evolve",
    "evolve_windows",
    "sample_events",
    "sample_events_windowed",
    "sample_nu_p",
    "trace_dual",
    "trace_dual_multi",
]

from typing import Iterable, Sequence

import numpy as np

from ..tree import Ball, VertexAddr
from .events import EventLog
from .rng import RngStream


class Configuration:
    """
    occupancy η of every ball vertex, in the ball's vertex order
    """

    def __init__(self, ball: Ball, occupancy: Sequence[int] | np.ndarray) -> None:
        occupancy = np.array(occupancy, dtype=np.uint8)
        if occupancy.shape != (ball.n_vertices,):
            raise ValueError(
                f"Configuration needs {ball.n_vertices} sites, got shape {occupancy.shape}"
            )
        if occupancy.size and occupancy.max() > 1:
            raise ValueError("Occupancy values must be 0 or 1")
        occupancy.setflags(write=False)
        self.ball = ball
        self.occupancy = occupancy

    @classmethod
    def empty(cls, ball: Ball) -> "Configuration":
        return cls(ball, np.zeros(ball.n_vertices, dtype=np.uint8))

    @classmethod
    def from_state_index(cls, ball: Ball, state: int) -> "Configuration":
        """
        bit i of `state` is the occupancy of vertex i
        """
        return cls(ball, [(state >> i) & 1 for i in range(ball.n_vertices)])

    @classmethod
    def with_particles(cls, ball: Ball, occupied: Iterable[VertexAddr]) -> "Configuration":
        occupancy = np.zeros(ball.n_vertices, dtype=np.uint8)
        for v in occupied:
            occupancy[ball.index_of(v)] = 1
        return cls(ball, occupancy)

    def state_index(self) -> int:
        return sum(1 << i for i, bit in enumerate(self.occupancy.tolist()) if bit)

    def key(self) -> bytes:
        return self.occupancy.tobytes()

    def particle_count(self) -> int:
        return int(self.occupancy.sum())

    def swapped(self, edge: int) -> "Configuration":
        a, b = self.ball.endpoints[edge]
        occupancy = self.occupancy.copy()
        occupancy[a], occupancy[b] = occupancy[b], occupancy[a]
        return Configuration(self.ball, occupancy)

    def __getitem__(self, v: VertexAddr | int) -> int:
        index = v if isinstance(v, (int, np.integer)) else self.ball.index_of(v)
        return int(self.occupancy[index])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.ball is other.ball and np.array_equal(self.occupancy, other.occupancy)

    def __hash__(self) -> int:
        return hash(self.key())

    def __repr__(self) -> str:
        return f"Configuration({''.join(map(str, self.occupancy.tolist()))})"


def evolve(eta0: Configuration, log: EventLog, t: float) -> Configuration:
    """
    applies every event of the log with time <= t, in time order
    """
    if eta0.ball is not log.ball:
        raise ValueError("Configuration and event log live on different balls")
    log.check_time(t)
    occupancy = eta0.occupancy.tolist()
    first_ends, second_ends = log.endpoint_lists
    for k in range(log.count_until(t)):
        a, b = first_ends[k], second_ends[k]
        occupancy[a], occupancy[b] = occupancy[b], occupancy[a]
    return Configuration(eta0.ball, occupancy)


def evolve_windows(eta0: Configuration, windows: Iterable[EventLog], t: float) -> Configuration:
    eta = eta0
    for log in windows:
        if log.start >= t:
            break
        eta = evolve(eta, log, min(t, log.horizon))
    return eta


def trace_dual_index(log: EventLog, x: int, t: float, s: float) -> int:
    """
    backward walk from (x, t): scanning events from t down to t - s, jump to
    the other endpoint of every event whose edge touches the current vertex
    """
    if not 0 <= s <= t:
        raise ValueError(f"Need 0 <= s <= t, got s={s}, t={t}")
    log.check_time(t)
    log.check_time(t - s)
    position = log.count_until(t)
    floor = log.count_until(t - s)
    first_ends, second_ends = log.endpoint_lists
    z = x
    while True:
        event = log.latest_event_before(z, position, floor)
        if event is None:
            return z
        a = first_ends[event]
        z = second_ends[event] if z == a else a
        position = event


def trace_dual(log: EventLog, x: VertexAddr, t: float, s: float) -> VertexAddr:
    index = log.ball.index_of(x)
    return log.ball.vertices[trace_dual_index(log, index, t, s)]


def trace_dual_multi(
    log: EventLog, xs: Sequence[VertexAddr], t: float, s: float | None = None
) -> tuple[VertexAddr, ...]:
    """
    traces every x_i through the same log; distinct starts stay distinct
    since every event acts on positions as a transposition
    """
    if len(set(xs)) != len(xs):
        raise ValueError(f"Dual walk starts must be distinct, got {[str(x) for x in xs]}")
    s = t if s is None else s
    return tuple(trace_dual(log, x, t, s) for x in xs)


def sample_nu_p(ball: Ball, p: float, rng: RngStream) -> Configuration:
    if not 0 < p < 1:
        raise ValueError(f"Density must lie in (0, 1), got {p}")
    return Configuration(ball, (rng.generator.random(ball.n_vertices) < p).astype(np.uint8))

import bisect
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from ..tree import Ball, EdgeAddr, VertexAddr
from ..utils import async_read_text, async_write_text, parse_csv, render_csv
from .rng import RngStream

logger = logging.getLogger(__name__)

EVENTLOG_SCHEMA = "ssep-tree eventlog v1"
MAX_RESAMPLES = 16


@dataclass(frozen=True)
class PoissonEvent:
    time: float
    edge: int


class EventLog:
    """
    realized swap clocks of a ball on (start, horizon]. times are strictly
    increasing, so the position of an event in the log is also its time order
    """

    def __init__(
        self,
        ball: Ball,
        horizon: float,
        times: np.ndarray,
        edges: np.ndarray,
        provenance: str = "",
        start: float = 0.0,
    ) -> None:
        times = np.array(times, dtype=np.float64)
        edges = np.array(edges, dtype=np.int64)
        if times.shape != edges.shape or times.ndim != 1:
            raise ValueError("Event times and edges must be 1-d arrays of equal length")
        if not np.isfinite(horizon) or horizon < start:
            raise ValueError(f"Invalid event window ({start}, {horizon}]")
        if len(times) > 0:
            if times[0] <= start or times[-1] > horizon:
                raise ValueError(f"Event times must lie in ({start}, {horizon}]")
            if np.any(np.diff(times) <= 0):
                raise ValueError("Event times must be strictly increasing")
            if edges.min() < 0 or edges.max() >= ball.n_edges:
                raise ValueError(f"Edge indices must lie in [0, {ball.n_edges - 1}]")
        times.setflags(write=False)
        edges.setflags(write=False)
        self.ball = ball
        self.start = float(start)
        self.horizon = float(horizon)
        self.times = times
        self.edges = edges
        self.provenance = provenance

    def __len__(self) -> int:
        return len(self.times)

    @property
    def events(self) -> list[PoissonEvent]:
        return [PoissonEvent(time, edge) for time, edge in zip(self.times.tolist(), self.edges.tolist())]

    def check_time(self, t: float) -> None:
        if not self.start <= t <= self.horizon:
            raise ValueError(f"Time {t} is outside the event window [{self.start}, {self.horizon}]")

    def count_until(self, t: float) -> int:
        """
        number of events with time <= t
        """
        return int(np.searchsorted(self.times, t, side="right"))

    @cached_property
    def time_list(self) -> list[float]:
        return self.times.tolist()

    @cached_property
    def endpoint_lists(self) -> tuple[list[int], list[int]]:
        ends = self.ball.endpoints[self.edges]
        return ends[:, 0].tolist(), ends[:, 1].tolist()

    @cached_property
    def vertex_events(self) -> tuple[list[int], ...]:
        """
        per vertex, the positions of the events whose edge touches it, increasing
        """
        n_vertices = self.ball.n_vertices
        if len(self) == 0:
            return tuple([] for _ in range(n_vertices))
        touched = self.ball.endpoints[self.edges].ravel()
        positions = np.repeat(np.arange(len(self)), 2)
        order = np.argsort(touched, kind="stable")
        counts = np.bincount(touched, minlength=n_vertices)
        groups = np.split(positions[order], np.cumsum(counts)[:-1])
        return tuple(group.tolist() for group in groups)

    def latest_event_before(self, vertex: int, position: int, floor: int) -> int | None:
        """
        the last event touching `vertex` with log position in [floor, position)
        """
        events = self.vertex_events[vertex]
        j = bisect.bisect_left(events, position) - 1
        if j < 0 or events[j] < floor:
            return None
        return events[j]

    def tail(self, s: float) -> "EventLog":
        """
        the events after s, as a log on (s, horizon]
        """
        self.check_time(s)
        first = self.count_until(s)
        return EventLog(
            self.ball, self.horizon, self.times[first:], self.edges[first:], self.provenance, start=s
        )

    def to_frame(self) -> pd.DataFrame:
        parents = [self.ball.edges[e].parent.dotted() for e in self.edges.tolist()]
        letters = [self.ball.edges[e].letter for e in self.edges.tolist()]
        return pd.DataFrame(
            {"time": self.times, "edge_parent": parents, "edge_letter": letters}
        )

    def header(self) -> str:
        return (
            f"{EVENTLOG_SCHEMA}; degree={self.ball.degree}; radius={self.ball.radius}; "
            f"start={self.start!r}; horizon={self.horizon!r}; provenance={self.provenance}"
        )

    def to_csv_text(self) -> str:
        return render_csv(self.to_frame(), self.header())

    @classmethod
    def from_csv_text(cls, text: str, ball: Ball) -> "EventLog":
        schema, frame = parse_csv(text)
        parts = [part.strip() for part in schema.split(";")]
        if parts[0] != EVENTLOG_SCHEMA:
            raise ValueError(f"Unsupported event log schema: {parts[0]!r}")
        meta = dict(part.split("=", 1) for part in parts[1:])
        if int(meta["degree"]) != ball.degree or int(meta["radius"]) != ball.radius:
            raise ValueError(
                f"Event log was recorded on a ball of degree {meta['degree']} and radius "
                f"{meta['radius']}, not on {ball}"
            )
        edges = [
            ball.edge_index[EdgeAddr(VertexAddr.parse(parent, ball.degree), int(letter))]
            for parent, letter in zip(frame["edge_parent"], frame["edge_letter"])
        ]
        return cls(
            ball,
            float(meta["horizon"]),
            np.array([float(time) for time in frame["time"]]),
            np.array(edges, dtype=np.int64),
            meta.get("provenance", ""),
            start=float(meta["start"]),
        )

    def to_file(self, file_path: str | Path) -> None:
        with open(file_path, "w", encoding="utf8") as file:
            file.write(self.to_csv_text())

    @classmethod
    def from_file(cls, file_path: str | Path, ball: Ball) -> "EventLog":
        with open(file_path, "r", encoding="utf8") as file:
            return cls.from_csv_text(file.read(), ball)

    async def async_to_file(self, file_path: str | Path) -> None:
        await async_write_text(Path(file_path), self.to_csv_text())

    @classmethod
    async def async_from_file(cls, file_path: str | Path, ball: Ball) -> "EventLog":
        return cls.from_csv_text(await async_read_text(Path(file_path)), ball)


def _draw_window(
    ball: Ball, start: float, stop: float, rng: RngStream
) -> tuple[np.ndarray, np.ndarray]:
    """
    superposition of the per-edge rate-1 clocks: a rate |E| Poisson process
    with uniform edge labels. ties at float resolution are resampled
    """
    generator = rng.generator
    for _ in range(MAX_RESAMPLES):
        n = generator.poisson(ball.n_edges * (stop - start))
        times = np.sort(generator.uniform(start, stop, n))
        edges = generator.integers(0, ball.n_edges, n)
        if n == 0 or (times[0] > start and np.all(np.diff(times) > 0)):
            return times, edges
        logger.warning("Coincident event times in (%s, %s], resampling", start, stop)
    raise RuntimeError(f"Could not draw tie-free events on ({start}, {stop}]")


def sample_events(ball: Ball, horizon: float, rng: RngStream) -> EventLog:
    if not horizon > 0:
        raise ValueError(f"Horizon must be positive, got {horizon}")
    times, edges = _draw_window(ball, 0.0, horizon, rng)
    return EventLog(ball, horizon, times, edges, rng.provenance())


def sample_events_windowed(
    ball: Ball, horizon: float, rng: RngStream, window: float
) -> Iterator[EventLog]:
    """
    the same process as sample_events, produced one window at a time so that
    long horizons never hold more than one window of events
    """
    if not horizon > 0 or not window > 0:
        raise ValueError(f"Horizon and window must be positive, got {horizon}, {window}")
    start = 0.0
    while start < horizon:
        stop = min(start + window, horizon)
        times, edges = _draw_window(ball, start, stop, rng)
        yield EventLog(ball, stop, times, edges, rng.provenance(), start=start)
        start = stop

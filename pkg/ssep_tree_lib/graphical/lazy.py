import bisect
import logging
from typing import Callable, Sequence

import numpy as np

from ..observables import LocalFunction, XiRecord, bits_to_index
from ..tree import BallShape, VertexAddr
from .dynamics import Configuration
from .events import MAX_RESAMPLES, EventLog
from .rng import RngStream

logger = logging.getLogger(__name__)

Word = tuple[int, ...]


class LazyGraphicalRepresentation:
    """
    the graphical representation on a ball that is never enumerated: the clock
    of an edge and the initial occupancy of a vertex are produced the first
    time a dual walk needs them, then kept.

    an edge is keyed by the word of its deeper endpoint
    """

    def __init__(
        self,
        shape: BallShape,
        horizon: float,
        clock: Callable[[Word], list[float]],
        initial: Callable[[Word], int],
        provenance: str = "",
    ) -> None:
        self.shape = shape
        self.horizon = float(horizon)
        self.provenance = provenance
        self._clock = clock
        self._initial = initial
        self._edge_times: dict[Word, list[float]] = {}
        self._vertex_events: dict[Word, tuple[list[float], list[Word]]] = {}
        self._eta0: dict[Word, int] = {}
        self._after_event: dict[tuple[Word, int], int] = {}

    @classmethod
    def sample(
        cls, shape: BallShape, horizon: float, p: float, rng: RngStream
    ) -> "LazyGraphicalRepresentation":
        """
        rate-1 Poisson clocks per edge and η_0 ~ ν_p, drawn from `rng` in access order
        """
        if not horizon > 0:
            raise ValueError(f"Horizon must be positive, got {horizon}")
        if not 0 < p < 1:
            raise ValueError(f"Density must lie in (0, 1), got {p}")
        generator = rng.generator

        def clock(_: Word) -> list[float]:
            for _ in range(MAX_RESAMPLES):
                times = np.sort(generator.uniform(0.0, horizon, generator.poisson(horizon)))
                if len(times) == 0 or (times[0] > 0 and np.all(np.diff(times) > 0)):
                    return times.tolist()
            raise RuntimeError("Could not draw a tie-free edge clock")

        def initial(_: Word) -> int:
            return int(generator.random() < p)

        return cls(shape, horizon, clock, initial, rng.provenance())

    @classmethod
    def from_event_log(cls, log: EventLog, eta0: Configuration) -> "LazyGraphicalRepresentation":
        """
        replays a materialized log, so both engines can be compared path by path
        """
        ball = log.ball
        if eta0.ball is not ball:
            raise ValueError("Configuration and event log live on different balls")
        if log.start != 0.0:
            raise ValueError("Only logs starting at time 0 can be replayed")
        by_edge: dict[Word, list[float]] = {}
        for time, edge in zip(log.time_list, log.edges.tolist()):
            by_edge.setdefault(ball.edges[edge].child.word, []).append(time)

        def clock(key: Word) -> list[float]:
            return by_edge.get(key, [])

        def initial(word: Word) -> int:
            return eta0[VertexAddr(word, ball.degree)]

        return cls(ball.shape, log.horizon, clock, initial, log.provenance)

    def edge_times(self, key: Word) -> list[float]:
        times = self._edge_times.get(key)
        if times is None:
            times = self._clock(key)
            self._edge_times[key] = times
        return times

    def eta0(self, word: Word) -> int:
        value = self._eta0.get(word)
        if value is None:
            value = self._initial(word)
            self._eta0[word] = value
        return value

    def vertex_events(self, word: Word) -> tuple[list[float], list[Word]]:
        """
        event times on the edges at `word`, increasing, with the vertex across each edge
        """
        cached = self._vertex_events.get(word)
        if cached is not None:
            return cached
        merged: list[tuple[float, Word]] = []
        for other in self.shape.neighbor_words(word):
            key = other if len(other) > len(word) else word
            merged.extend((time, other) for time in self.edge_times(key))
        merged.sort()
        times = [time for time, _ in merged]
        partners = [other for _, other in merged]
        for k in range(1, len(times)):
            if times[k] == times[k - 1]:
                logger.warning("Coincident clock events at vertex %s, time %r", word, times[k])
                raise RuntimeError(f"Coincident clock events at time {times[k]!r}")
        self._vertex_events[word] = (times, partners)
        return times, partners

    def _check_word(self, word: Word) -> None:
        if not self.shape.contains_word(word):
            raise ValueError(f"Vertex {word} is outside the ball of radius {self.shape.radius}")

    def trace_word(self, word: Word, t: float, s: float, inclusive: bool = True) -> Word:
        """
        X_s^{t,x}; with inclusive=False events at exactly time t are skipped,
        which gives the walk of η_{t-}
        """
        if not 0 <= s <= t <= self.horizon:
            raise ValueError(f"Need 0 <= s <= t <= {self.horizon}, got s={s}, t={t}")
        floor = t - s
        z = word
        cursor = t
        while True:
            times, partners = self.vertex_events(z)
            if inclusive:
                j = bisect.bisect_right(times, cursor) - 1
                inclusive = False
            else:
                j = bisect.bisect_left(times, cursor) - 1
            if j < 0 or times[j] <= floor:
                return z
            z = partners[j]
            cursor = times[j]

    def occupancy(self, word: Word, t: float, inclusive: bool = True) -> int:
        """
        η_t(word), or η_{t-}(word) with inclusive=False.

        the occupancy just after the j-th event at z is η_{τ-}(y) for the partner
        y across it, so a backward walk stops at the first event already resolved
        and every event it passed is stored with the same value
        """
        if not 0 <= t <= self.horizon:
            raise ValueError(f"Need 0 <= t <= {self.horizon}, got t={t}")
        chain: list[tuple[Word, int]] = []
        z = word
        cursor = t
        while True:
            times, partners = self.vertex_events(z)
            if inclusive:
                j = bisect.bisect_right(times, cursor) - 1
                inclusive = False
            else:
                j = bisect.bisect_left(times, cursor) - 1
            if j < 0:
                value = self.eta0(z)
                break
            cached = self._after_event.get((z, j))
            if cached is not None:
                value = cached
                break
            chain.append((z, j))
            z = partners[j]
            cursor = times[j]
        for key in chain:
            self._after_event[key] = value
        return value

    def trace_dual(self, x: VertexAddr, t: float, s: float) -> VertexAddr:

        self._check_word(x.word)
        return VertexAddr(self.trace_word(x.word, t, s), self.shape.degree)

    def trace_dual_multi(
        self, xs: Sequence[VertexAddr], t: float, s: float | None = None
    ) -> tuple[VertexAddr, ...]:
        if len(set(xs)) != len(xs):
            raise ValueError(f"Dual walk starts must be distinct, got {[str(x) for x in xs]}")
        s = t if s is None else s
        return tuple(self.trace_dual(x, t, s) for x in xs)

    def configuration_at(self, xs: Sequence[VertexAddr], t: float) -> tuple[int, ...]:
        """
        η_t(x) = η_0(X_t^{t,x})
        """
        for x in xs:
            self._check_word(x.word)
        return tuple(self.occupancy(x.word, t) for x in xs)

    def xi_path(
        self, F: LocalFunction, times: Sequence[float], path_id: int = 0
    ) -> list[XiRecord]:
        """
        ξ_t^F at every requested time. between events touching the sites of F
        the integrand is constant; at such an event the site takes the value
        its partner held just before, η_{s-}(y), resolved through the event memo
        """
        if not times:
            return []
        targets = sorted(times)
        if targets[0] < 0 or targets[-1] > self.horizon:
            raise ValueError(f"Times must lie in [0, {self.horizon}]")
        words = [x.word for x in F.sites]
        for word in words:
            self._check_word(word)
        position = {word: i for i, word in enumerate(words)}
        bits = [self.eta0(word) for word in words]
        table = F.table.tolist()

        stop = targets[-1]
        events: list[tuple[float, Word, Word]] = []
        seen: set[tuple[float, frozenset[Word]]] = set()
        for word in words:
            event_times, partners = self.vertex_events(word)
            for time, other in zip(event_times, partners):
                if time > stop:
                    break
                edge = (time, frozenset((word, other)))
                if edge in seen:
                    continue
                seen.add(edge)
                events.append((time, word, other))
        events.sort()

        records: list[XiRecord] = []
        xi = 0.0
        last = 0.0
        value = table[bits_to_index(bits)]
        target = 0
        for time, word, other in events:
            while target < len(targets) and targets[target] < time:
                records.append(self._record(targets[target], xi + value * (targets[target] - last), path_id))
                target += 1
            xi += value * (time - last)
            last = time
            i = position[word]
            j = position.get(other)
            if j is None:
                bits[i] = self.occupancy(other, time, inclusive=False)
            else:
                bits[i], bits[j] = bits[j], bits[i]
            value = table[bits_to_index(bits)]
        while target < len(targets):
            records.append(self._record(targets[target], xi + value * (targets[target] - last), path_id))
            target += 1
        order = sorted(range(len(times)), key=lambda k: times[k])
        result: list[XiRecord] = [records[0]] * len(times)
        for rank, k in enumerate(order):
            result[k] = records[rank]
        return result

    def accumulate_xi(self, F: LocalFunction, t: float, path_id: int = 0) -> XiRecord:
        return self.xi_path(F, [t], path_id)[0]

    def _record(self, t: float, xi: float, path_id: int) -> XiRecord:
        return XiRecord(t=t, xi=xi, path_id=path_id, seed=self.provenance)

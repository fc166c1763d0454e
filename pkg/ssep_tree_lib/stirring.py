import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .graphical.dynamics import Configuration
from .graphical.rng import RngStream
from .observables import LocalFunction
from .oracle import (
    DEFAULT_TUPLE_CAP,
    TupleSpace,
    build_stirring_generator,
    resolvent_solve,
    tuple_space,
)
from .tree import Ball, BallShape, VertexAddr, distance, neighbor_words
from .utils import async_write_text, render_csv

logger = logging.getLogger(__name__)

RESOLVENT_SCHEMA = "ssep-tree resolvent v1"

Word = tuple[int, ...]


@dataclass(frozen=True)
class StirringTuple:
    positions: tuple[VertexAddr, ...]

    def __post_init__(self) -> None:
        positions = tuple(self.positions)
        if not positions:
            raise ValueError("A stirring tuple needs at least one position")
        if len(set(positions)) != len(positions):
            raise ValueError(f"Stirring positions must be distinct, got {[str(x) for x in positions]}")
        if len({x.degree for x in positions}) != 1:
            raise ValueError("Stirring positions must live on the same tree")
        object.__setattr__(self, "positions", positions)

    @property
    def m(self) -> int:
        return len(self.positions)

    @property
    def degree(self) -> int:
        return self.positions[0].degree

    @property
    def words(self) -> tuple[Word, ...]:
        return tuple(x.word for x in self.positions)

    def __str__(self) -> str:
        return "(" + ", ".join(str(x) for x in self.positions) + ")"


def stir_words(
    words: list[Word], duration: float, generator: np.random.Generator, degree: int, shape: BallShape | None
) -> tuple[list[Word], int]:
    """
    Gillespie run of the stirring dynamics: every edge touching a component
    rings at rate 1 and swaps its endpoints, moving whichever components sit on them
    """

    def around(word: Word) -> list[Word]:
        return shape.neighbor_words(word) if shape is not None else neighbor_words(word, degree)

    elapsed = 0.0
    jumps = 0
    while True:
        edges = sorted({(min(w, o, key=len), max(w, o, key=len)) for w in words for o in around(w)})
        if not edges:
            return words, jumps
        elapsed += generator.exponential(1.0 / len(edges))
        if elapsed > duration:
            return words, jumps
        a, b = edges[int(generator.integers(len(edges)))]
        words = [b if w == a else a if w == b else w for w in words]
        jumps += 1


def simulate_stirring_jumps(
    start: StirringTuple, duration: float, rng: RngStream, ball: Ball | BallShape | None = None
) -> tuple[StirringTuple, int]:
    """
    the stirring tuple after `duration` together with the number of swaps it
    went through. without a ball the walk lives on the whole tree
    """
    if duration < 0:
        raise ValueError(f"Duration must be nonnegative, got {duration}")
    shape = ball.shape if isinstance(ball, Ball) else ball
    if shape is not None:
        outside = [str(x) for x in start.positions if not shape.contains(x)]
        if outside:
            raise ValueError(f"Start positions {outside} are outside the ball")
    words, jumps = stir_words(list(start.words), duration, rng.generator, start.degree, shape)
    return StirringTuple(tuple(VertexAddr(w, start.degree) for w in words)), jumps


def simulate_stirring(
    start: StirringTuple, duration: float, rng: RngStream, ball: Ball | BallShape | None = None
) -> StirringTuple:
    return simulate_stirring_jumps(start, duration, rng, ball)[0]


def stirring_path(
    start: StirringTuple, times: np.ndarray | list[float], rng: RngStream, ball: Ball | BallShape | None = None
) -> list[tuple[Word, ...]]:
    """
    positions of one stirring run at each of the increasing `times`; the
    dynamics is Markov, so running it piece by piece between the times is exact
    """
    times = [float(s) for s in times]
    if any(s < 0 for s in times) or any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("Times must be nonnegative and increasing")
    shape = ball.shape if isinstance(ball, Ball) else ball
    words = list(start.words)
    now = 0.0
    path = []
    for s in times:
        words, _ = stir_words(words, s - now, rng.generator, start.degree, shape)
        now = s
        path.append(tuple(words))
    return path


def heat_kernel_mc(
    x: VertexAddr, z: VertexAddr, u: float, reps: int, rng: RngStream
) -> tuple[float, float]:
    """
    estimates Q¹_u(x, z) on the infinite tree. only the projection of the
    walk onto the geodesic from x to z matters: the index j of the nearest
    geodesic vertex and the height h above it. every jump picks one of the
    d + 1 neighbors uniformly, at total rate d + 1
    """
    if not u > 0:
        raise ValueError(f"Time must be positive, got {u}")
    if reps < 1:
        raise ValueError(f"Need at least one replicate, got {reps}")
    d = x.degree
    k = distance(x, z)
    generator = rng.generator
    n_jumps = generator.poisson((d + 1) * u, size=reps)
    j = np.zeros(reps, dtype=np.int64)
    h = np.zeros(reps, dtype=np.int64)
    for step in range(int(n_jumps.max(initial=0))):
        active = n_jumps > step
        choice = generator.integers(0, d + 1, size=reps)
        off = h > 0
        forward = active & ~off & (choice == 0) & (j < k)
        backward = active & ~off & (choice == 1) & (j > 0)
        leave = active & ~off & ~forward & ~backward
        climb = active & off
        j += forward.astype(np.int64) - backward.astype(np.int64)
        h = np.where(climb, np.where(choice == 0, h - 1, h + 1), h)
        h = np.where(leave, 1, h)
    hits = (j == k) & (h == 0)
    estimate = float(hits.mean())
    return estimate, math.sqrt(estimate * (1 - estimate) / reps)


def resolvent_mc_G(
    eta: Configuration, F: LocalFunction, lam: float, reps: int, rng: RngStream
) -> tuple[float, float]:
    """
    G^F_λ(η) = E[H(η, Y_T)] / λ with T ~ Exp(λ) and Y the stirring tuple
    started at the sites of F, confined to the ball of η
    """
    if not lam > 0:
        raise ValueError(f"Resolvent parameter must be positive, got {lam}")
    if reps < 2:
        raise ValueError(f"Need at least two replicates for a standard error, got {reps}")
    if F.is_zero():
        return 0.0, 0.0
    ball = eta.ball
    start = StirringTuple(F.sites)
    generator = rng.generator
    occupancy = eta.occupancy.tolist()
    table = F.table.tolist()
    weights = [1 << (F.m - 1 - i) for i in range(F.m)]
    samples = np.empty(reps)
    for r in range(reps):
        duration = generator.exponential(1.0 / lam)
        words, _ = stir_words(list(start.words), duration, generator, start.degree, ball.shape)
        index = sum(
            w * occupancy[ball.index_of(VertexAddr(word, start.degree))] for w, word in zip(weights, words)
        )
        samples[r] = table[index]
    return float(samples.mean() / lam), float(samples.std(ddof=1) / math.sqrt(reps) / lam)


class ResolventTable:
    """
    β_λ(y) = ∫ e^{-λs} Q^m_s(source, y) ds over the tuple space of a ball
    """

    def __init__(self, lam: float, source: StirringTuple, values: np.ndarray, space: TupleSpace) -> None:
        values = np.array(values, dtype=np.float64)
        if values.shape != (space.size,):
            raise ValueError(f"Resolvent table needs {space.size} values, got shape {values.shape}")
        if space.m != source.m:
            raise ValueError(f"Source has {source.m} positions but the tuple space has {space.m}")
        values.setflags(write=False)
        self.lam = float(lam)
        self.source = source
        self.values = values
        self.space = space

    @property
    def ball(self) -> Ball:
        return self.space.ball

    def value(self, y: tuple[VertexAddr, ...]) -> float:
        return float(self.values[self.space.index_of(tuple(y))])

    def normalization_error(self) -> float:
        return abs(self.lam * float(self.values.sum()) - 1.0)

    def to_frame(self) -> pd.DataFrame:
        labels = [
            " ".join(self.ball.vertices[v].dotted() or "." for v in row)
            for row in self.space.tuples.tolist()
        ]
        return pd.DataFrame({"tuple": labels, "value": self.values})

    def header(self) -> str:
        source = " ".join(x.dotted() or "." for x in self.source.positions)
        return (
            f"{RESOLVENT_SCHEMA}; lambda={self.lam!r}; degree={self.ball.degree}; "
            f"radius={self.ball.radius}; source={source}"
        )

    def to_csv_text(self) -> str:
        return render_csv(self.to_frame(), self.header())

    async def async_to_file(self, file_path: str | Path) -> None:
        await async_write_text(Path(file_path), self.to_csv_text())


def exact_beta(
    ball: Ball, source: StirringTuple, lam: float, cap: int = DEFAULT_TUPLE_CAP
) -> ResolventTable:
    space = tuple_space(ball, source.m, cap)
    gen = build_stirring_generator(ball, source.m, cap)
    beta = resolvent_solve(gen, lam, space.index_of(source.positions))
    logger.debug("Solved resolvent on %d tuples, lambda=%s", space.size, lam)
    return ResolventTable(lam, source, beta, space)


def exact_G(eta: Configuration, F: LocalFunction, lam: float, table: ResolventTable) -> float:
    """
    Σ_y H(η, y) β_λ(y) over the tuple space

    raises:
        ValueError: if the table was solved for other sites, another λ or another ball
    """
    if table.source.positions != F.sites:
        raise ValueError(f"Resolvent table was solved from {table.source}, not from the sites of F")
    if table.lam != float(lam):
        raise ValueError(f"Resolvent table was solved for lambda={table.lam}, not {lam}")
    if table.ball is not eta.ball:
        raise ValueError("Resolvent table and configuration live on different balls")
    weights = 1 << np.arange(F.m - 1, -1, -1)
    patterns = eta.occupancy[table.space.tuples].astype(np.int64) @ weights
    return float(np.dot(table.values, F.table[patterns]))

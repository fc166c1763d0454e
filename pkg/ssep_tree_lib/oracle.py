import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import poisson

from .graphical.dynamics import Configuration
from .tree import Ball, VertexAddr
from .utils import CapExceededError

logger = logging.getLogger(__name__)

DEFAULT_SSEP_CAP = 2**20
DEFAULT_TUPLE_CAP = 200_000
UNIFORMIZATION_TAIL = 1e-12


@dataclass(frozen=True)
class GeneratorMatrix:
    """
    sparse rate matrix A, rows summing to zero. `semigroup_apply` moves
    distributions forward, i.e. computes v e^{tA}
    """

    matrix: sp.csr_matrix
    description: str

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def max_rate(self) -> float:
        return float(-self.matrix.diagonal().min()) if self.dimension else 0.0

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        difference = self.matrix - self.matrix.T
        return difference.count_nonzero() == 0 or abs(difference).max() <= tol

    def to_coordinate_text(self) -> str:
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        lines = [f"# {self.description}; dimension={self.dimension}; nnz={coo.nnz}"]
        lines.extend(
            f"{coo.row[k]} {coo.col[k]} {coo.data[k]!r}" for k in order.tolist()
        )
        return "\n".join(lines) + "\n"


def _assemble(rows: list[int] | np.ndarray, cols: list[int] | np.ndarray, n: int, description: str) -> GeneratorMatrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    off = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    exits = np.asarray(off.sum(axis=1)).ravel()
    matrix = (off - sp.diags(exits)).tocsr()
    return GeneratorMatrix(matrix, description)


def build_ssep_generator(ball: Ball, cap: int = DEFAULT_SSEP_CAP) -> GeneratorMatrix:
    """
    state s encodes η with bit i = η(vertex i); every edge whose endpoints
    differ swaps them at rate 1
    """
    n = 2**ball.n_vertices
    if n > cap:
        raise CapExceededError("SSEP state space", n, cap)
    states = np.arange(n, dtype=np.int64)
    rows, cols = [], []
    for a, b in ball.endpoints.tolist():
        active = states[((states >> a) ^ (states >> b)) & 1 == 1]
        rows.append(active)
        cols.append(active ^ ((1 << a) | (1 << b)))
    rows_all = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    cols_all = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    return _assemble(rows_all, cols_all, n, f"ssep generator on {ball!r}")


def falling_factorial(n: int, m: int) -> int:
    result = 1
    for k in range(m):
        result *= n - k
    return result


class TupleSpace:
    """
    ordered m-tuples of distinct ball vertices, listed lexicographically by vertex index
    """

    def __init__(self, ball: Ball, m: int, cap: int = DEFAULT_TUPLE_CAP) -> None:
        if not 1 <= m <= ball.n_vertices:
            raise ValueError(f"Need 1 <= m <= {ball.n_vertices}, got {m}")
        size = falling_factorial(ball.n_vertices, m)
        if size > cap:
            raise CapExceededError(f"{m}-particle stirring state space", size, cap)
        self.ball = ball
        self.m = m
        self.tuples = np.array(
            list(itertools.permutations(range(ball.n_vertices), m)), dtype=np.int64
        ).reshape(size, m)
        self.tuples.setflags(write=False)
        self.index = {tuple(row): i for i, row in enumerate(self.tuples.tolist())}

    @property
    def size(self) -> int:
        return len(self.tuples)

    def index_of(self, sites: tuple[VertexAddr, ...]) -> int:
        key = tuple(self.ball.index_of(x) for x in sites)
        try:
            return self.index[key]
        except KeyError:
            raise ValueError(f"{[str(x) for x in sites]} is not a tuple of distinct vertices") from None

    def addresses(self, i: int) -> tuple[VertexAddr, ...]:
        return tuple(self.ball.vertices[v] for v in self.tuples[i].tolist())


TUPLE_SPACE_CACHE_SIZE = 8


@lru_cache(maxsize=TUPLE_SPACE_CACHE_SIZE)
def tuple_space(ball: Ball, m: int, cap: int = DEFAULT_TUPLE_CAP) -> TupleSpace:
    """
    only the most recently used spaces stay cached; a ball is keyed by identity
    """
    return TupleSpace(ball, m, cap)


def build_stirring_generator(ball: Ball, m: int, cap: int = DEFAULT_TUPLE_CAP) -> GeneratorMatrix:
    """
    every edge touching the tuple swaps its endpoints at rate 1: a lone
    component steps across it, two adjacent components exchange places
    """
    space = tuple_space(ball, m, cap)
    rows, cols = [], []
    for i, positions in enumerate(space.tuples.tolist()):
        touched = sorted({e for v in positions for e in ball.incident[v]})
        for e in touched:
            a, b = ball.endpoints[e].tolist()
            moved = tuple(b if v == a else a if v == b else v for v in positions)
            rows.append(i)
            cols.append(space.index[moved])
    return _assemble(rows, cols, space.size, f"{m}-particle stirring generator on {ball!r}")


def semigroup_apply(
    gen: GeneratorMatrix, v: np.ndarray, t: float, tail: float = UNIFORMIZATION_TAIL
) -> np.ndarray:
    """
    v e^{tA} by uniformization: with Λ the largest exit rate and
    P = I + A/Λ, e^{tA} = Σ_k Poisson(Λt; k) P^k, cut where the Poisson tail
    drops below `tail`
    """
    if t < 0:
        raise ValueError(f"Time must be nonnegative, got {t}")
    v = np.asarray(v, dtype=np.float64)
    rate = gen.max_rate
    if t == 0 or rate == 0:
        return v.copy()
    mean = rate * t
    cutoff = int(poisson.isf(tail, mean)) + 1
    weights = poisson.pmf(np.arange(cutoff + 1), mean)
    step = (sp.identity(gen.dimension, format="csr") + gen.matrix / rate).T.tocsr()
    term = v.copy()
    result = weights[0] * term
    for k in range(1, cutoff + 1):
        term = step @ term
        result += weights[k] * term
    logger.debug("Uniformization used %d terms (rate %s, t %s)", cutoff, rate, t)
    return result


def resolvent_solve(gen: GeneratorMatrix, lam: float, source: int) -> np.ndarray:
    """
    β(y) = ∫ e^{-λs} P_s(source, y) ds, the solution of (λI - A)ᵀ β = δ_source

    raises:
        RuntimeError: if the sparse solve fails
    """
    if not lam > 0:
        raise ValueError(f"Resolvent parameter must be positive, got {lam}")
    if not 0 <= source < gen.dimension:
        raise ValueError(f"Source index {source} is outside [0, {gen.dimension - 1}]")
    system = (lam * sp.identity(gen.dimension, format="csc") - gen.matrix.T).tocsc()
    rhs = np.zeros(gen.dimension)
    rhs[source] = 1.0
    beta = np.atleast_1d(spla.spsolve(system, rhs))
    if not np.all(np.isfinite(beta)):
        raise RuntimeError(f"Resolvent solve failed for lambda={lam}")
    return beta


def configuration_states(ball: Ball, cap: int = DEFAULT_SSEP_CAP) -> list[Configuration]:
    n = 2**ball.n_vertices
    if n > cap:
        raise CapExceededError("SSEP state space", n, cap)
    return [Configuration.from_state_index(ball, s) for s in range(n)]


def duality_gap(ball: Ball, eta0: Configuration, x: VertexAddr, t: float) -> float:
    """
    |P(η_t(x) = 1) - Σ_y Q¹_t(x, y) η_0(y)|, each side by uniformization of its own generator
    """
    ssep = build_ssep_generator(ball)
    start = np.zeros(ssep.dimension)
    start[eta0.state_index()] = 1.0
    law = semigroup_apply(ssep, start, t)
    bit = (np.arange(ssep.dimension) >> ball.index_of(x)) & 1
    occupied = float(np.dot(law, bit))

    walk = build_stirring_generator(ball, 1)
    delta = np.zeros(walk.dimension)
    delta[ball.index_of(x)] = 1.0
    kernel = semigroup_apply(walk, delta, t)
    dual = float(np.dot(kernel, eta0.occupancy.astype(np.float64)))
    return abs(occupied - dual)


def green_function_srw(d: int) -> float:
    """
    ∫_0^∞ Q¹_u(x, x) du for the rate-1-per-edge walk on T_d: the jump chain
    returns with probability 1/d, so x is visited d/(d-1) times on average,
    each visit lasting 1/(d+1)
    """
    if d < 2:
        raise ValueError(f"Degree must be at least 2, got {d}")
    return d / (d * d - 1)


def sigma_occupation_exact(d: int, p: float) -> float:
    if not 0 <= p <= 1:
        raise ValueError(f"Density must lie in [0, 1], got {p}")
    return 2 * p * (1 - p) * green_function_srw(d)


def heat_kernel_bound(d: int, u: float) -> float:
    return math.exp(-u * (math.sqrt(d) - 1) ** 2)

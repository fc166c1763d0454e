import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Sequence

import numpy as np
import pandas as pd
import scipy.stats
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .graphical.dynamics import sample_nu_p
from .graphical.rng import RngStream
from .martingale import EDGE_RATE, ExactGProvider, GProvider
from .observables import LocalFunction, XiRecord, require_centered
from .stirring import StirringTuple, stirring_path
from .tree import Ball
from .utils import render_csv

logger = logging.getLogger(__name__)

ESTIMATES_SCHEMA = "ssep-tree estimates v1"
RATES_SCHEMA = "ssep-tree rates v1"
MIN_SIGMA_SAMPLES = 30
MIN_TAIL_HITS = 10
DEFAULT_TAIL_TOLERANCE = 1e-3


@dataclass(frozen=True)
class EstimateCI:
    value: float
    std_error: float
    reps: int
    method: str

    def __post_init__(self) -> None:
        if not self.std_error >= 0:
            raise ValueError(f"Standard error must be nonnegative, got {self.std_error}")

    def to_row(self, **params: Any) -> dict[str, Any]:
        return {**asdict(self), **params}

    def agrees_with(self, other: "EstimateCI", k: float = 3.0) -> bool:
        return abs(self.value - other.value) <= k * math.hypot(self.std_error, other.std_error)


@dataclass(frozen=True)
class RatePoint:
    u: float
    empirical: float
    theoretical: float
    tail_count: int
    gap: float


def _common_time(records: Sequence[XiRecord]) -> float:
    times = {r.t for r in records}
    if len(times) != 1:
        raise ValueError(f"Samples must share one time, got {sorted(times)}")
    return times.pop()


def estimate_sigma_empirical(
    records: Sequence[XiRecord], min_samples: int = MIN_SIGMA_SAMPLES
) -> EstimateCI:
    """
    Var(ξ_t)/t with a leave-one-out jackknife standard error

    raises:
        ValueError: on fewer than `min_samples` samples or on mixed times
    """
    if len(records) < min_samples:
        raise ValueError(f"Need at least {min_samples} samples, got {len(records)}")
    t = _common_time(records)
    if not t > 0:
        raise ValueError(f"Samples must be taken at a positive time, got {t}")
    x = np.array([r.xi for r in records])
    n = len(x)
    value = float(x.var(ddof=1) / t)
    if value == 0.0:
        return EstimateCI(0.0, 0.0, n, "empirical")
    rest = n - 1
    means = (x.sum() - x) / rest
    leave_one_out = ((x**2).sum() - x**2 - rest * means**2) / (rest - 1) / t
    spread = leave_one_out - leave_one_out.mean()
    std_error = math.sqrt(rest / n * float(np.dot(spread, spread)))
    return EstimateCI(value, std_error, n, "empirical")


def required_cutoff(F: LocalFunction, tolerance: float) -> float:
    """
    smallest U with 2K_H²m²e^{-U(√d-1)²}/(√d-1)² <= tolerance, the bound on
    the part of 2∫C(u)du beyond U
    """
    if not tolerance > 0:
        raise ValueError(f"Tolerance must be positive, got {tolerance}")
    rate = (math.sqrt(F.degree) - 1) ** 2
    scale = 2 * F.sup_norm**2 * F.m**2 / rate
    if scale <= tolerance:
        return 0.0
    return math.log(scale / tolerance) / rate


def duality_grid(U: float, step: float = 0.05, switch: float = 2.0, late_points: int = 60) -> np.ndarray:
    """
    quadrature nodes on [0, U]: evenly spaced up to `switch`, geometric after,
    since the covariance decays exponentially
    """
    if not U > 0:
        raise ValueError(f"Cutoff must be positive, got {U}")
    switch = min(switch, U)
    early = np.linspace(0.0, switch, max(2, int(round(switch / step)) + 1))
    late = np.geomspace(switch, U, late_points) if U > switch else np.empty(0)
    return np.unique(np.concatenate([early, late]))


class _PairCovariance:
    """
    E_{ν_p}[H(η, x)H(η, y)] for a tuple y, summing over the occupancy
    patterns of the sites of x and y together
    """

    def __init__(self, F: LocalFunction, p: float) -> None:
        self.F = F
        self.p = p
        self.start = tuple(x.word for x in F.sites)
        self._cache: dict[tuple, float] = {}

    def __call__(self, y: tuple) -> float:
        value = self._cache.get(y)
        if value is None:
            union = sorted(set(self.start) | set(y))
            where = {word: i for i, word in enumerate(union)}
            n = len(union)
            patterns = (np.arange(2**n)[:, None] >> np.arange(n - 1, -1, -1)) & 1
            ones = patterns.sum(axis=1)
            probs = self.p**ones * (1 - self.p) ** (n - ones)
            weights = 1 << np.arange(self.F.m - 1, -1, -1)
            fx = self.F.table[patterns[:, [where[w] for w in self.start]] @ weights]
            fy = self.F.table[patterns[:, [where[w] for w in y]] @ weights]
            value = float(np.sum(probs * fx * fy))
            self._cache[y] = value
        return value


def summarize(samples: Sequence[float] | np.ndarray, method: str) -> EstimateCI:
    """
    sample mean with its standard error
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < 2:
        raise ValueError(f"Need at least two samples, got {len(x)}")
    return EstimateCI(float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))), len(x), method)


def duality_integrals(
    F: LocalFunction,
    p: float,
    U: float,
    grid: np.ndarray | None,
    reps: int,
    rng: RngStream,
    tolerance: float = DEFAULT_TAIL_TOLERANCE,
    start: int = 0,
) -> np.ndarray:
    """
    2∫_0^U K(Y_u)du for replicates start, ..., start + reps - 1, replicate r
    walking on the stream rng.spawn(r)

    raises:
        ValueError: if F is not centered, or if U leaves a tail above `tolerance`
    """
    require_centered(F, p)
    needed = required_cutoff(F, tolerance)
    if U < needed:
        raise ValueError(
            f"Cutoff U={U} leaves a covariance tail above {tolerance}; need U >= {needed:.4f}"
        )
    if F.is_zero():
        return np.zeros(reps)
    grid = duality_grid(U) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid[0] != 0 or grid[-1] != U or np.any(np.diff(grid) <= 0):
        raise ValueError(f"Grid must increase from 0 to U={U}")
    covariance = _PairCovariance(F, p)
    source = StirringTuple(F.sites)
    integrals = np.empty(reps)
    for r in range(reps):
        path = stirring_path(source, grid, rng.spawn(start + r))
        integrals[r] = 2 * trapezoid([covariance(y) for y in path], grid)
    return integrals


def estimate_sigma_duality(
    F: LocalFunction,
    p: float,
    U: float,
    grid: np.ndarray | None,
    reps: int,
    rng: RngStream,
    tolerance: float = DEFAULT_TAIL_TOLERANCE,
    start: int = 0,
) -> EstimateCI:
    """
    2∫_0^U C(u)du with C(u) = E[K(Y_u)], Y the stirring tuple from the sites
    of F on the whole tree and K(y) the exact ν_p covariance of H at the
    sites and at y. every replicate integrates its own C by the trapezoid rule

    raises:
        ValueError: if F is not centered, or if U leaves a tail above `tolerance`
    """
    if reps < 2:
        raise ValueError(f"Need at least two replicates, got {reps}")
    return summarize(duality_integrals(F, p, U, grid, reps, rng, tolerance, start), "duality")


def estimate_sigma_carre_du_champ(
    ball: Ball,
    F: LocalFunction,
    p: float,
    lam: float,
    reps: int,
    rng: RngStream,
    provider: GProvider | None = None,
) -> EstimateCI:
    """
    E_{ν_p}[ΓG_λ], the mean rate at which the Dynkin martingale of G_λ
    accumulates quadratic variation; it tends to σ²_F as λ -> 0
    """
    require_centered(F, p)
    if reps < 2:
        raise ValueError(f"Need at least two replicates, got {reps}")
    provider = provider or ExactGProvider(ball, F, lam)
    samples = np.empty(reps)
    for r in range(reps):
        diffs = provider.differences(sample_nu_p(ball, p, rng.spawn(r)))
        samples[r] = EDGE_RATE * float(np.dot(diffs, diffs))
    return EstimateCI(
        float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(reps)), reps, "carre_du_champ"
    )


def clt_test(samples: Sequence[float] | np.ndarray, sigma: float, t: float = 1.0) -> tuple[float, float]:
    """
    Kolmogorov-Smirnov distance between samples/(σ√t) and the standard
    normal law, with the asymptotic p-value

    raises:
        ValueError: if σ = 0 while some sample is not
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("Need at least one sample")
    if sigma < 0 or not t > 0:
        raise ValueError(f"Need sigma >= 0 and t > 0, got sigma={sigma}, t={t}")
    if sigma == 0:
        if np.any(x != 0):
            raise ValueError("sigma is 0 but the samples are not all 0")
        return 0.0, 1.0
    result = scipy.stats.kstest(x / (sigma * math.sqrt(t)), "norm", method="asymp")
    return float(result.statistic), float(result.pvalue)


def rate_theoretical(u: float, sigma2: float) -> float:
    if not sigma2 > 0:
        raise ValueError(f"sigma^2 must be positive, got {sigma2}")
    return u * u / (2 * sigma2)


def tail_rate(
    samples: Sequence[float] | np.ndarray,
    t: float,
    a_t: float,
    u_grid: Iterable[float],
    sigma2: float,
) -> list[RatePoint]:
    """
    (t/a_t²)·log P(ξ_t/a_t >= u) next to u²/(2σ²). points without a single
    tail hit are dropped; the gap is |empirical + theoretical| since the
    empirical value is a log-probability
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("Need at least one sample")
    if not a_t > 0 or not t > 0:
        raise ValueError(f"Need t > 0 and a_t > 0, got t={t}, a_t={a_t}")
    scaled = x / a_t
    points = []
    for u in u_grid:
        hits = int(np.count_nonzero(scaled >= u))
        if hits == 0:
            logger.warning("No sample reaches u=%s at t=%s, dropping the point", u, t)
            continue
        if hits < MIN_TAIL_HITS:
            logger.warning("Only %d samples reach u=%s at t=%s", hits, u, t)
        empirical = t / a_t**2 * math.log(hits / len(x))
        theoretical = rate_theoretical(u, sigma2)
        points.append(RatePoint(float(u), empirical, theoretical, hits, abs(empirical + theoretical)))
    return points


def scaled_cumulant(
    samples: Sequence[float] | np.ndarray, t: float, a_t: float, c_grid: Iterable[float]
) -> np.ndarray:
    """
    (t/a_t²)·log E exp(c·a_t·ξ_t/t) for each c; the limit is c²σ²/2
    """
    x = np.asarray(samples, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("Need at least one sample")
    log_n = math.log(len(x))
    return np.array(
        [t / a_t**2 * (float(logsumexp(c * a_t * x / t)) - log_n) for c in c_grid]
    )


def legendre_rate(u: float, c_grid: Sequence[float] | np.ndarray, cumulant: Sequence[float] | np.ndarray) -> float:
    """
    sup_c {c·u - Λ(c)} over the grid
    """
    c = np.asarray(c_grid, dtype=np.float64)
    values = np.asarray(cumulant, dtype=np.float64)
    if c.shape != values.shape or len(c) == 0:
        raise ValueError("Cumulant values must match the c grid")
    return float(np.max(c * u - values))


def _check_path(f: np.ndarray, T: float, sigma: float) -> float:
    if len(f) < 2:
        raise ValueError("A path needs at least two grid points")
    if abs(f[0]) > 1e-12:
        raise ValueError(f"Path must start at 0, got f(0)={f[0]!r}")
    if not T > 0 or not sigma > 0:
        raise ValueError(f"Need T > 0 and sigma > 0, got T={T}, sigma={sigma}")
    return T / (len(f) - 1)


def rate_functional_I(f: Sequence[float] | np.ndarray, T: float, sigma: float) -> float:
    """
    (1/2σ²)∫_0^T f'(t)² dt for f sampled on a uniform grid of [0, T], taking
    f linear between grid points
    """
    f = np.asarray(f, dtype=np.float64)
    h = _check_path(f, T, sigma)
    slopes = np.diff(f) / h
    return float(np.sum(slopes**2) * h / (2 * sigma**2))


def rate_functional_dual(
    f: Sequence[float] | np.ndarray, g: Sequence[float] | np.ndarray, T: float, sigma: float
) -> float:
    """
    f_T g_T - ∫f dg - (σ²/2)∫g² dt, which never exceeds rate_functional_I(f)
    and meets it where the midpoint values of g equal f'/σ²
    """
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise ValueError("f and g must be sampled on the same grid")
    h = _check_path(f, T, sigma)
    f_mid = (f[1:] + f[:-1]) / 2
    g_mid = (g[1:] + g[:-1]) / 2
    return float(f[-1] * g[-1] - np.sum(f_mid * np.diff(g)) - sigma**2 / 2 * np.sum(g_mid**2) * h)


def cesaro_trend(estimates: Sequence[EstimateCI]) -> list[float]:
    """
    relative change of consecutive estimates along an increasing t grid
    """
    changes = []
    for before, after in zip(estimates, estimates[1:]):
        changes.append((after.value - before.value) / abs(before.value) if before.value else math.nan)
    return changes


def estimates_frame(rows: Iterable[dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(list(rows))


def render_estimates_csv(rows: Iterable[dict[str, Any]]) -> str:
    return render_csv(estimates_frame(rows), ESTIMATES_SCHEMA)


def render_rates_csv(points: Iterable[tuple[float, float, RatePoint]]) -> str:
    """
    rows of (t, a_t, point)
    """
    frame = pd.DataFrame(
        [{"t": t, "a_t": a_t, **asdict(point)} for t, a_t, point in points],
        columns=["t", "a_t", "u", "empirical", "theoretical", "tail_count", "gap"],
    )
    return render_csv(frame, RATES_SCHEMA)

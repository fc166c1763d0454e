import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import pandas as pd

from .graphical.dynamics import Configuration, sample_nu_p
from .graphical.events import EventLog, sample_events
from .graphical.rng import RngStream
from .observables import LocalFunction, evaluate
from .oracle import DEFAULT_SSEP_CAP, DEFAULT_TUPLE_CAP, configuration_states
from .stirring import ResolventTable, StirringTuple, exact_G, exact_beta, resolvent_mc_G
from .tree import Ball
from .utils import render_csv

logger = logging.getLogger(__name__)

DECOMPOSITION_SCHEMA = "ssep-tree decomposition v1"

# Rate of every unordered edge. Half the double sum over ordered neighbor
# pairs visits each edge twice, so the generator is the plain sum over
# unordered edges at this rate. The generator, the carré du champ and the
# Feynman-Kac exponent all take their constant from here.
EDGE_RATE = 1.0

# exp() overflows a double a little above this
EXPONENT_LIMIT = 700.0


def active_edges(eta: Configuration) -> np.ndarray:
    """
    edges whose endpoints differ; a swap across any other edge leaves η unchanged
    """
    ends = eta.ball.endpoints
    return np.flatnonzero(eta.occupancy[ends[:, 0]] != eta.occupancy[ends[:, 1]])


def apply_generator(ball: Ball, g: Callable[[Configuration], float], eta: Configuration) -> float:
    """
    ℒg(η) = Σ_e [g(η^e) - g(η)] over the unordered edges of the ball
    """
    if eta.ball is not ball:
        raise ValueError("Configuration does not live on this ball")
    base = g(eta)
    return EDGE_RATE * sum(g(eta.swapped(e)) - base for e in active_edges(eta).tolist())


def carre_du_champ(ball: Ball, g: Callable[[Configuration], float], eta: Configuration) -> float:
    """
    Γg(η) = Σ_e (g(η^e) - g(η))², the density of the predictable quadratic
    variation of the Dynkin martingale of g
    """
    if eta.ball is not ball:
        raise ValueError("Configuration does not live on this ball")
    base = g(eta)
    return EDGE_RATE * sum((g(eta.swapped(e)) - base) ** 2 for e in active_edges(eta).tolist())


class GProvider(Protocol):
    """
    source of G^F_λ along a path. `exact` says whether the values solve the
    generator identity to rounding, or only up to Monte Carlo error
    """

    F: LocalFunction
    lam: float
    exact: bool

    def G(self, eta: Configuration) -> float: ...

    def differences(self, eta: Configuration) -> np.ndarray: ...


class _CachedProvider:
    F: LocalFunction
    lam: float
    exact: bool

    def __init__(self) -> None:
        self._values: dict[bytes, float] = {}
        self._differences: dict[bytes, np.ndarray] = {}

    def _compute(self, eta: Configuration) -> float:
        raise NotImplementedError

    def G(self, eta: Configuration) -> float:
        key = eta.key()
        value = self._values.get(key)
        if value is None:
            value = self._compute(eta)
            self._values[key] = value
        return value

    def differences(self, eta: Configuration) -> np.ndarray:
        """
        G(η^e) - G(η) for every edge e of the ball, zero where the swap does nothing
        """
        key = eta.key()
        cached = self._differences.get(key)
        if cached is None:
            cached = np.zeros(eta.ball.n_edges)
            base = self.G(eta)
            for e in active_edges(eta).tolist():
                cached[e] = self.G(eta.swapped(e)) - base
            cached.setflags(write=False)
            self._differences[key] = cached
        return cached


class ExactGProvider(_CachedProvider):
    exact = True

    def __init__(self, ball: Ball, F: LocalFunction, lam: float, cap: int = DEFAULT_TUPLE_CAP) -> None:
        super().__init__()
        self.ball = ball
        self.F = F
        self.lam = float(lam)
        self.table: ResolventTable = exact_beta(ball, StirringTuple(F.sites), lam, cap)

    def _compute(self, eta: Configuration) -> float:
        return exact_G(eta, self.F, self.lam, self.table)


class MCGProvider(_CachedProvider):
    """
    G from resolvent_mc_G, one estimate per distinct configuration; the
    generator identity then only holds within Monte Carlo error
    """

    exact = False

    def __init__(self, F: LocalFunction, lam: float, reps: int, rng: RngStream) -> None:
        super().__init__()
        self.F = F
        self.lam = float(lam)
        self.reps = reps
        self.rng = rng

    def _compute(self, eta: Configuration) -> float:
        return resolvent_mc_G(eta, self.F, self.lam, self.reps, self.rng)[0]


def verify_generator_identity(
    ball: Ball,
    F: LocalFunction,
    lam: float,
    configurations: Iterable[Configuration] | None = None,
    provider: GProvider | None = None,
    cap: int = DEFAULT_SSEP_CAP,
) -> float:
    """
    max |ℒG(η) - λG(η) + F(η)| over the given configurations, or over every
    configuration of the ball when none are given

    raises:
        CapExceededError: if the exhaustive check would enumerate more than `cap` states
    """
    provider = provider or ExactGProvider(ball, F, lam)
    if configurations is None:
        configurations = configuration_states(ball, cap)
    worst = 0.0
    for eta in configurations:
        generator = EDGE_RATE * float(provider.differences(eta).sum())
        worst = max(worst, abs(generator - provider.lam * provider.G(eta) + evaluate(F, eta)))
    return worst


@dataclass(frozen=True)
class DecompositionRecord:
    t: float
    lam: float
    xi: float
    M: float
    remainder: float
    J: float
    residual: float
    path_id: int = 0


def decompose_path(
    eta0: Configuration,
    log: EventLog,
    F: LocalFunction,
    lam: float,
    t: float,
    provider: GProvider,
    path_id: int = 0,
) -> DecompositionRecord:
    """
    ξ_t, M_t = G(η_t) - G(η_0) - ∫ℒG(η_s)ds, the remainder
    G(η_t) - G(η_0) - λ∫G(η_s)ds and J_t = ∫ΓG(η_s)ds along one path. every
    integrand is constant between events, so each integral is an exact sum

    raises:
        ValueError: if t is beyond the horizon of the log
    """
    if eta0.ball is not log.ball:
        raise ValueError("Configuration and event log live on different balls")
    if provider.F is not F and provider.F != F:
        raise ValueError("G provider was built for another local function")
    if provider.lam != float(lam):
        raise ValueError(f"G provider was built for lambda={provider.lam}, not {lam}")
    log.check_time(t)
    ball = eta0.ball
    states: dict[bytes, tuple[float, float, float, float]] = {}

    def values(eta: Configuration) -> tuple[float, float, float, float]:
        key = eta.key()
        cached = states.get(key)
        if cached is None:
            diffs = provider.differences(eta)
            cached = (
                evaluate(F, eta),
                provider.G(eta),
                EDGE_RATE * float(diffs.sum()),
                EDGE_RATE * float(np.dot(diffs, diffs)),
            )
            states[key] = cached
        return cached

    occupancy = eta0.occupancy.tolist()
    first_ends, second_ends = log.endpoint_lists
    times = log.time_list
    eta = eta0
    f_value, g_value, lg_value, gamma_value = values(eta)
    g_start = g_value
    xi = int_g = int_lg = j_total = 0.0
    last = log.start
    for k in range(log.count_until(t)):
        a, b = first_ends[k], second_ends[k]
        if occupancy[a] == occupancy[b]:
            continue
        span = times[k] - last
        xi += f_value * span
        int_g += g_value * span
        int_lg += lg_value * span
        j_total += gamma_value * span
        last = times[k]
        occupancy[a], occupancy[b] = occupancy[b], occupancy[a]
        eta = Configuration(ball, occupancy)
        f_value, g_value, lg_value, gamma_value = values(eta)
    span = t - last
    xi += f_value * span
    int_g += g_value * span
    int_lg += lg_value * span
    j_total += gamma_value * span

    martingale = g_value - g_start - int_lg
    remainder = g_value - g_start - provider.lam * int_g
    return DecompositionRecord(
        t=t,
        lam=provider.lam,
        xi=xi,
        M=martingale,
        remainder=remainder,
        J=j_total,
        residual=xi - martingale + remainder,
        path_id=path_id,
    )


def quadratic_variation(
    eta0: Configuration, log: EventLog, F: LocalFunction, lam: float, t: float, provider: GProvider
) -> float:
    return decompose_path(eta0, log, F, lam, t, provider).J


def decomposition_frame(records: Iterable[DecompositionRecord]) -> pd.DataFrame:
    records = list(records)
    return pd.DataFrame(
        {
            "path_id": [r.path_id for r in records],
            "t": [r.t for r in records],
            "lambda": [r.lam for r in records],
            "xi": [r.xi for r in records],
            "M": [r.M for r in records],
            "remainder": [r.remainder for r in records],
            "J": [r.J for r in records],
            "residual": [r.residual for r in records],
        }
    )


def render_decomposition_csv(records: Iterable[DecompositionRecord]) -> str:
    return render_csv(decomposition_frame(records), DECOMPOSITION_SCHEMA)


def exp_martingale_path(
    eta0: Configuration, log: EventLog, t: float, theta: float, provider: GProvider
) -> float:
    """
    exp{θ(G(η_t) - G(η_0)) - ∫ Σ_e (e^{θΔ_eG} - 1)(η_u) du}, the Feynman-Kac
    exponential martingale of θG evaluated at t
    """
    log.check_time(t)
    ball = eta0.ball
    brackets: dict[bytes, float] = {}

    def bracket(eta: Configuration) -> float:
        key = eta.key()
        value = brackets.get(key)
        if value is None:
            value = EDGE_RATE * float(np.expm1(theta * provider.differences(eta)).sum())
            brackets[key] = value
        return value

    occupancy = eta0.occupancy.tolist()
    first_ends, second_ends = log.endpoint_lists
    times = log.time_list
    eta = eta0
    current = bracket(eta)
    integral = 0.0
    last = log.start
    for k in range(log.count_until(t)):
        a, b = first_ends[k], second_ends[k]
        if occupancy[a] == occupancy[b]:
            continue
        integral += current * (times[k] - last)
        last = times[k]
        occupancy[a], occupancy[b] = occupancy[b], occupancy[a]
        eta = Configuration(ball, occupancy)
        current = bracket(eta)
    integral += current * (t - last)
    exponent = theta * (provider.G(eta) - provider.G(eta0)) - integral
    if exponent > EXPONENT_LIMIT:
        raise OverflowError(f"Exponential martingale exponent {exponent!r} overflows")
    return math.exp(exponent)


def exp_martingale_samples(
    ball: Ball,
    F: LocalFunction,
    c: float,
    t: float,
    a_t: float,
    reps: int,
    rng: RngStream,
    p: float = 0.5,
    provider: GProvider | None = None,
    start: int = 0,
) -> list[float]:
    """
    𝓜_t^{t,c} on replicates start, ..., start + reps - 1, with λ = t^{-1/2}
    and θ = c·a_t/t. replicate i draws η_0 ~ ν_p and its clocks from its own stream

    raises:
        OverflowError: if θ·sup|ΔG| plus the largest possible bracket could overflow the exponential
    """
    if not t > 0 or not a_t > 0:
        raise ValueError(f"Need t > 0 and a_t > 0, got t={t}, a_t={a_t}")
    lam = 1 / math.sqrt(t)
    theta = c * a_t / t
    # |G| <= K_H/λ, so every jump of G is at most 2K_H/λ; each term e^x - 1 of
    # the bracket is at least -1, so the bracket adds at most |E|·t
    exponent_bound = abs(theta) * 2 * F.sup_norm / lam + EDGE_RATE * ball.n_edges * t
    if exponent_bound > EXPONENT_LIMIT:
        raise OverflowError(f"c={c}, t={t} is too large: the exponent may reach {exponent_bound!r}, beyond {EXPONENT_LIMIT}")
    provider = provider or ExactGProvider(ball, F, lam)
    samples = []
    for i in range(start, start + reps):
        stream = rng.spawn(i)
        eta0 = sample_nu_p(ball, p, stream)
        log = sample_events(ball, t, stream)
        samples.append(exp_martingale_path(eta0, log, t, theta, provider))
    return samples


def exp_martingale_check(
    ball: Ball,
    F: LocalFunction,
    c: float,
    t: float,
    a_t: float,
    reps: int,
    rng: RngStream,
    p: float = 0.5,
) -> tuple[float, float]:
    """
    sample mean of 𝓜_t^{t,c} and its standard error; the mean should be 1
    """
    if reps < 2:
        raise ValueError(f"Need at least two replicates, got {reps}")
    samples = np.array(exp_martingale_samples(ball, F, c, t, a_t, reps, rng, p))
    return float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(reps))


def martingale_moments(records: Sequence[DecompositionRecord]) -> dict[str, float]:
    """
    mean of M_t and of M_t² - J_t with their standard errors; both should vanish
    """
    if len(records) < 2:
        raise ValueError(f"Need at least two paths, got {len(records)}")
    m = np.array([r.M for r in records])
    excess = m**2 - np.array([r.J for r in records])
    root = math.sqrt(len(records))
    return {
        "mean_M": float(m.mean()),
        "se_M": float(m.std(ddof=1) / root),
        "mean_M2_minus_J": float(excess.mean()),
        "se_M2_minus_J": float(excess.std(ddof=1) / root),
    }

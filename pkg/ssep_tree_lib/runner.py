import asyncio
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Awaitable, Callable

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .graphical.dynamics import Configuration, sample_nu_p
from .graphical.events import sample_events
from .graphical.lazy import LazyGraphicalRepresentation
from .graphical.rng import RngStream, mix64
from .martingale import (
    DecompositionRecord,
    ExactGProvider,
    decompose_path,
    exp_martingale_samples,
    martingale_moments,
    render_decomposition_csv,
    verify_generator_identity,
)
from .observables import (
    XiRecord,
    center,
    mean_under_nu_p,
    occupation_function,
    product_function,
    render_xi_csv,
    require_centered,
)
from .oracle import duality_gap, green_function_srw, heat_kernel_bound, sigma_occupation_exact
from .statistics import (
    EstimateCI,
    clt_test,
    cesaro_trend,
    duality_grid,
    duality_integrals,
    estimate_sigma_empirical,
    legendre_rate,
    rate_theoretical,
    render_estimates_csv,
    render_rates_csv,
    required_cutoff,
    scaled_cumulant,
    summarize,
    tail_rate,
)
from .stirring import StirringTuple, exact_beta, heat_kernel_mc
from .tree import BallShape, VertexAddr, build_ball
from .utils import async_write_text, flatten, gather_batches, render_csv, split_batches

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "sigma", "clt", "mdp", "decompose", "verify", "heat", "center")
HEAT_TIMES = (0.5, 1.0, 2.0, 4.0)
HEAT_DEGREES = (2, 3)
CHECKS_SCHEMA = "ssep-tree checks v1"
HEAT_SCHEMA = "ssep-tree heat v1"
CLT_SCHEMA = "ssep-tree clt v1"
CUMULANT_SCHEMA = "ssep-tree cumulants v1"

# streams for the parts of a run that are not replicates
GREEN_STREAM = 1 << 62
HEAT_STREAM = (1 << 62) + 1
VERIFY_STREAM = (1 << 62) + 2
EXP_STREAM = (1 << 62) + 3
DUALITY_STREAM = (1 << 62) + 4
TRUNCATION_STREAM = (1 << 62) + 5


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (threshold {self.threshold:.3e})"


def checks_frame(checks: list[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "check": [c.name for c in checks],
            "value": [c.value for c in checks],
            "threshold": [c.threshold for c in checks],
            "passed": [c.passed for c in checks],
        }
    )


def xi_batch(
    config: ExperimentConfig, times: list[float], family: int | None, start: int, stop: int
) -> list[XiRecord]:
    """
    ξ at every time of `times` for replicates start, ..., stop - 1. replicate
    i runs on stream i of the master seed, or on child i of stream `family`
    when one is given
    """
    F = config.local_function()
    horizon = max(times)
    shape = BallShape(config.tree.degree, config.radius_for(horizon))
    records = []
    for i in range(start, stop):
        if family is None:
            rng = RngStream.for_replicate(config.seed, i)
        else:
            rng = RngStream(config.seed, family).spawn(i)
        engine = LazyGraphicalRepresentation.sample(shape, horizon, config.p, rng)
        records.extend(engine.xi_path(F, times, path_id=i))
    return records


def sigma_duality_batch(config: ExperimentConfig, U: float, start: int, stop: int) -> list[float]:
    rng = RngStream(config.seed, DUALITY_STREAM)
    integrals = duality_integrals(
        config.local_function(),
        config.p,
        U,
        None,
        stop - start,
        rng,
        config.schedule.duality_tolerance,
        start,
    )
    return integrals.tolist()


def decompose_batch(
    config: ExperimentConfig, radius: int, t: float, lam: float, start: int, stop: int
) -> list[DecompositionRecord]:
    ball = build_ball(config.tree.degree, radius, config.caps.ball_vertices)
    F = config.local_function()
    provider = ExactGProvider(ball, F, lam, config.caps.tuple_states)
    records = []
    for i in range(start, stop):
        rng = RngStream.for_replicate(config.seed, i)
        eta0 = sample_nu_p(ball, config.p, rng)
        log = sample_events(ball, t, rng)
        records.append(decompose_path(eta0, log, F, lam, t, provider, path_id=i))
    return records


def exp_martingale_batch(
    config: ExperimentConfig, radius: int, c: float, t: float, start: int, stop: int
) -> list[float]:
    ball = build_ball(config.tree.degree, radius, config.caps.ball_vertices)
    rng = RngStream(config.seed, mix64(EXP_STREAM, int(round(c * 1_000_000)) & ((1 << 64) - 1)))
    return exp_martingale_samples(
        ball,
        config.local_function(),
        c,
        t,
        config.mdp.a_t(t),
        stop - start,
        rng,
        config.p,
        start=start,
    )


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, output_dir: str | Path, workers: int = 1) -> None:
        self.config = config
        self.output_dir = Path(output_dir)
        self.workers = workers
        self.lines: list[str] = []

    def get_output_path(self, subcommand: str) -> Path:
        return self.output_dir / subcommand

    async def run(self, subcommand: str) -> int:
        """
        runs one subcommand and returns its exit code: 0 when every asserted
        check passed, 1 otherwise

        raises:
            ValueError: if the subcommand is unknown
        """
        handlers: dict[str, Callable[[], Awaitable[int]]] = {
            "simulate": self.simulate,
            "sigma": self.sigma,
            "clt": self.clt,
            "mdp": self.mdp,
            "decompose": self.decompose,
            "verify": self.verify,
            "heat": self.heat,
            "center": self.center,
        }
        if subcommand not in handlers:
            raise ValueError(f"Unknown subcommand {subcommand!r}, expected one of {SUBCOMMANDS}")
        started = time.perf_counter()
        code = await handlers[subcommand]()
        logger.info("%s finished in %.2fs with exit code %d", subcommand, time.perf_counter() - started, code)
        return code

    def report(self, line: str) -> None:
        self.lines.append(line)
        logger.info(line)

    async def write_resolved_config(self, subcommand: str, horizon: float | None = None) -> None:
        config = self.config.resolved(horizon) if horizon is not None else self.config
        await async_write_text(self.get_output_path(subcommand) / "resolved_config.yaml", config.to_yaml())

    async def write_checks(self, subcommand: str, checks: list[CheckResult]) -> int:
        for check in checks:
            self.report(check.line())
        await async_write_text(
            self.get_output_path(subcommand) / "checks.csv", render_csv(checks_frame(checks), CHECKS_SCHEMA)
        )
        return 0 if all(c.passed for c in checks) else 1

    async def sample_xi(self, times: list[float], replicates: int | None = None) -> list[XiRecord]:
        replicates = self.config.replicates if replicates is None else replicates
        batches = split_batches(replicates, self.config.schedule.batch_size)
        logger.info(
            "Sampling %d replicates up to t=%s on radius %d in %d batches",
            replicates,
            max(times),
            self.config.radius_for(max(times)),
            len(batches),
        )
        return flatten(await gather_batches(xi_batch, batches, self.workers, self.config, times, None))

    def sigma_oracle(self) -> float | None:
        """
        closed form σ² for occupation functions, None otherwise
        """
        if self.config.function.kind != "occupation":
            return None
        return sigma_occupation_exact(self.config.tree.degree, self.config.p)

    async def sigma_duality(self) -> EstimateCI:
        F = self.config.local_function()
        U = self.config.schedule.duality_cutoff or math.ceil(
            required_cutoff(F, self.config.schedule.duality_tolerance)
        )
        reps = self.config.schedule.duality_reps
        batches = split_batches(reps, self.config.schedule.batch_size)
        integrals = flatten(await gather_batches(sigma_duality_batch, batches, self.workers, self.config, U))
        return summarize(integrals, "duality")

    async def sigma_value(self) -> float:
        oracle = self.sigma_oracle()
        if oracle is not None:
            return oracle
        return (await self.sigma_duality()).value

    async def simulate(self) -> int:
        F = self.config.local_function()
        require_centered(F, self.config.p)
        times = sorted(self.config.schedule.t_grid)
        records = await self.sample_xi(times)
        await self.write_resolved_config("simulate", max(times))
        path = self.get_output_path("simulate") / "xi.csv"
        await async_write_text(path, render_xi_csv(records))
        self.report(f"wrote {len(records)} xi samples to {path}")
        return 0

    async def sigma(self) -> int:
        F = self.config.local_function()
        require_centered(F, self.config.p)
        times = sorted(self.config.schedule.t_grid)
        records = await self.sample_xi(times)
        by_time = {t: [r for r in records if r.t == t] for t in times}
        empirical = [estimate_sigma_empirical(by_time[t]) for t in times]
        duality = await self.sigma_duality()
        oracle = self.sigma_oracle()

        rows = [e.to_row(t=t) for e, t in zip(empirical, times)]
        rows.append(duality.to_row(t=math.nan))
        if oracle is not None:
            rows.append(EstimateCI(oracle, 0.0, 0, "exact").to_row(t=math.nan))
        for change, t in zip(cesaro_trend(empirical), times[1:]):
            self.report(f"relative change of the empirical estimate up to t={t}: {change:+.4f}")

        final = empirical[-1]
        checks = [
            CheckResult(
                "empirical and duality estimates agree (3 SE)",
                abs(final.value - duality.value),
                3 * math.hypot(final.std_error, duality.std_error),
                final.agrees_with(duality),
            )
        ]
        if oracle is not None:
            for estimate in (final, duality):
                error = abs(estimate.value - oracle) / oracle
                checks.append(CheckResult(f"{estimate.method} estimate within 5% of exact", error, 0.05, error <= 0.05))
        if self.config.tree.radius == "auto":
            checks.append(await self.truncation_check(final, max(times)))

        await self.write_resolved_config("sigma", max(times))
        await async_write_text(self.get_output_path("sigma") / "estimates.csv", render_estimates_csv(rows))
        return await self.write_checks("sigma", checks)

    async def truncation_check(self, estimate: EstimateCI, horizon: float) -> CheckResult:
        """
        reruns the empirical estimate two levels deeper on an independent stream
        family; the two must agree within 2 SE
        """
        radius = self.config.radius_for(horizon)
        deeper = self.config.model_copy(
            update={"tree": self.config.tree.model_copy(update={"radius": radius + 2})}
        )
        batches = split_batches(self.config.replicates, self.config.schedule.batch_size)
        records = flatten(await gather_batches(xi_batch, batches, self.workers, deeper, [horizon], TRUNCATION_STREAM))
        other = estimate_sigma_empirical(records)
        self.report(f"sigma^2 at radius {radius}: {estimate.value:.5f}, at radius {radius + 2}: {other.value:.5f}")
        return CheckResult(
            f"independent estimates at radius {radius} and {radius + 2} agree (2 SE)",
            abs(estimate.value - other.value),
            2 * math.hypot(estimate.std_error, other.std_error),
            estimate.agrees_with(other, 2.0),
        )

    async def clt(self) -> int:
        F = self.config.local_function()
        require_centered(F, self.config.p)
        n = self.config.schedule.n_scale
        t = self.config.schedule.clt_t
        records = await self.sample_xi([t * n])
        samples = np.array([r.xi for r in records]) / math.sqrt(n)
        sigma = math.sqrt(await self.sigma_value())
        statistic, pvalue = clt_test(samples, sigma, t)
        frame = pd.DataFrame(
            [{"N": n, "t": t, "reps": len(samples), "sigma2": sigma**2, "ks_statistic": statistic, "p_value": pvalue}]
        )
        await self.write_resolved_config("clt", t * n)
        await async_write_text(self.get_output_path("clt") / "clt.csv", render_csv(frame, CLT_SCHEMA))
        return await self.write_checks("clt", [CheckResult("KS p-value above 0.01", pvalue, 0.01, pvalue > 0.01)])

    async def mdp(self) -> int:
        F = self.config.local_function()
        require_centered(F, self.config.p)
        sigma2 = await self.sigma_value()
        times = sorted(self.config.mdp.t_grid)
        c_grid = self.config.mdp.c_grid
        points = []
        cumulant_rows = []
        for t in times:
            a_t = self.config.mdp.a_t(t)
            samples = np.array([r.xi for r in await self.sample_xi([t])])
            for point in tail_rate(samples, t, a_t, self.config.mdp.u_grid, sigma2):
                points.append((t, a_t, point))
            cumulant = scaled_cumulant(samples, t, a_t, c_grid)
            for c, value in zip(c_grid, cumulant.tolist()):
                cumulant_rows.append({"t": t, "c": c, "empirical": value, "theoretical": c * c * sigma2 / 2})
            for u in self.config.mdp.u_grid:
                self.report(
                    f"t={t} u={u}: legendre rate {legendre_rate(u, c_grid, cumulant):.4f}, "
                    f"theoretical {rate_theoretical(u, sigma2):.4f}"
                )

        checks = []
        for t in times:
            finite = [p for s, _, p in points if s == t and math.isfinite(p.empirical)]
            checks.append(CheckResult(f"finite tail rates at t={t}", len(finite), 1, len(finite) >= 1))
        first, last = times[0], times[-1]
        gaps = {(s, p.u): p.gap for s, _, p in points}
        shared = [u for u in self.config.mdp.u_grid if (first, u) in gaps and (last, u) in gaps]
        if len(times) > 1:
            closing = [u for u in shared if gaps[(last, u)] <= gaps[(first, u)]]
            checks.append(
                CheckResult(
                    f"gap does not grow from t={first} to t={last} at some u", len(closing), 1, len(closing) >= 1
                )
            )

        await self.write_resolved_config("mdp", max(times))
        output = self.get_output_path("mdp")
        await async_write_text(output / "rates.csv", render_rates_csv(points))
        await async_write_text(
            output / "cumulants.csv", render_csv(pd.DataFrame(cumulant_rows), CUMULANT_SCHEMA)
        )
        return await self.write_checks("mdp", checks)

    async def decompose(self) -> int:
        F = self.config.local_function()
        require_centered(F, self.config.p)
        t = self.config.schedule.decompose_t
        lam = self.config.lam_for(t)
        radius = self.config.radius_for(t)
        batches = split_batches(self.config.replicates, self.config.schedule.batch_size)
        records: list[DecompositionRecord] = flatten(
            await gather_batches(decompose_batch, batches, self.workers, self.config, radius, t, lam)
        )
        worst = max(abs(r.residual) for r in records)
        checks = [CheckResult("pathwise decomposition residual", worst, 1e-8, worst < 1e-8)]
        if len(records) >= 2:
            moments = martingale_moments(records)
            checks.append(
                CheckResult(
                    "mean of M_t vanishes (3 SE)",
                    abs(moments["mean_M"]),
                    3 * moments["se_M"],
                    abs(moments["mean_M"]) <= 3 * moments["se_M"],
                )
            )
            checks.append(
                CheckResult(
                    "mean of M_t^2 - J_t vanishes (3 SE)",
                    abs(moments["mean_M2_minus_J"]),
                    3 * moments["se_M2_minus_J"],
                    abs(moments["mean_M2_minus_J"]) <= 3 * moments["se_M2_minus_J"],
                )
            )
            for c in self.config.mdp.c_grid:
                samples = flatten(
                    await gather_batches(exp_martingale_batch, batches, self.workers, self.config, radius, c, t)
                )
                mean = summarize(samples, f"exp martingale c={c}")
                checks.append(
                    CheckResult(
                        f"exponential martingale mean is 1 at c={c} (3 SE)",
                        abs(mean.value - 1),
                        3 * mean.std_error,
                        abs(mean.value - 1) <= 3 * mean.std_error,
                    )
                )

        await self.write_resolved_config("decompose", t)
        await async_write_text(
            self.get_output_path("decompose") / "decomposition.csv", render_decomposition_csv(records)
        )
        return await self.write_checks("decompose", checks)

    async def verify(self) -> int:
        checks = await asyncio.to_thread(verify_suite, self.config.seed)
        await self.write_resolved_config("verify")
        return await self.write_checks("verify", checks)

    async def heat(self) -> int:
        degrees = sorted(set(HEAT_DEGREES) | {self.config.tree.degree})
        rows = []
        checks = []
        for k, (d, u) in enumerate((d, u) for d in degrees for u in HEAT_TIMES):
            root = VertexAddr.root(d)
            rng = RngStream(self.config.seed, mix64(HEAT_STREAM, k))
            estimate, error = heat_kernel_mc(root, root, u, self.config.replicates, rng)
            bound = heat_kernel_bound(d, u)
            passed = estimate <= bound + 3 * error
            rows.append({"degree": d, "u": u, "estimate": estimate, "std_error": error, "bound": bound, "passed": passed})
            checks.append(CheckResult(f"heat kernel bound d={d} u={u}", estimate - bound, 3 * error, passed))
        for d in degrees:
            checks.append(await asyncio.to_thread(green_check, d, self.config.schedule.duality_reps, self.config.seed))
        await self.write_resolved_config("heat")
        await async_write_text(self.get_output_path("heat") / "heat.csv", render_csv(pd.DataFrame(rows), HEAT_SCHEMA))
        return await self.write_checks("heat", checks)

    async def center(self) -> int:
        F = self.config.local_function()
        mean = mean_under_nu_p(F, self.config.p)
        path = self.get_output_path("center") / "function.txt"
        await center(F, self.config.p).async_to_file(path)
        await self.write_resolved_config("center")
        self.report(f"removed mean {mean!r} under nu_{self.config.p}; centered function written to {path}")
        return 0


def green_check(d: int, reps: int, seed: int, tolerance: float = 1e-3) -> CheckResult:
    """
    trapezoid integral of Monte Carlo estimates of Q¹_u(x, x) against d/(d²-1)
    """
    root = VertexAddr.root(d)
    rate = (math.sqrt(d) - 1) ** 2
    U = math.log(1 / (tolerance * rate)) / rate
    grid = duality_grid(U)
    estimates = np.ones(len(grid))
    errors = np.zeros(len(grid))
    for k, u in enumerate(grid.tolist()):
        if u > 0:
            estimates[k], errors[k] = heat_kernel_mc(root, root, u, reps, RngStream(seed, mix64(mix64(GREEN_STREAM, d), k)))
    widths = np.diff(grid)
    weights = np.zeros(len(grid))
    weights[:-1] += widths / 2
    weights[1:] += widths / 2
    integral = float(np.dot(weights, estimates))
    spread = math.sqrt(float(np.dot(weights**2, errors**2)))
    exact = green_function_srw(d)
    return CheckResult(
        f"green function d={d} matches Monte Carlo integral",
        abs(integral - exact),
        4 * spread + tolerance + 0.01 * exact,
        abs(integral - exact) <= 4 * spread + tolerance + 0.01 * exact,
    )


def verify_suite(seed: int) -> list[CheckResult]:
    """
    exact checks on tiny balls: generator identity, pathwise decomposition,
    duality and resolvent normalization
    """
    checks = []
    star = build_ball(2, 1)
    root = VertexAddr.root(2)
    occupation = occupation_function(root, 0.5)
    for lam in (0.5, 1.0):
        residual = verify_generator_identity(star, occupation, lam)
        checks.append(CheckResult(f"generator identity on ball(2,1), lambda={lam}", residual, 1e-10, residual < 1e-10))

    ball = build_ball(2, 2)
    pair = product_function([root, VertexAddr((0,), 2)], 0.5)
    rng = RngStream(seed, VERIFY_STREAM)
    sample = [sample_nu_p(ball, 0.5, rng.spawn(i)) for i in range(100)]
    residual = verify_generator_identity(ball, pair, 0.5, sample)
    checks.append(CheckResult("generator identity on ball(2,2), m=2, lambda=0.5", residual, 1e-10, residual < 1e-10))

    provider = ExactGProvider(star, occupation, 1.0)
    worst = 0.0
    for i in range(100):
        stream = rng.spawn(1000 + i)
        eta0 = sample_nu_p(star, 0.5, stream)
        log = sample_events(star, 5.0, stream)
        worst = max(worst, abs(decompose_path(eta0, log, occupation, 1.0, 5.0, provider, i).residual))
    checks.append(CheckResult("pathwise decomposition on ball(2,1), t=5", worst, 1e-8, worst < 1e-8))

    gap = max(
        duality_gap(star, Configuration.from_state_index(star, s), root, t)
        for s in range(2**star.n_vertices)
        for t in (0.3, 1.0)
    )
    checks.append(CheckResult("duality on ball(2,1)", gap, 1e-8, gap < 1e-8))

    tables = [
        exact_beta(star, StirringTuple((root,)), 1.0),
        exact_beta(ball, StirringTuple(pair.sites), 0.5),
    ]
    normalization = max(table.normalization_error() for table in tables)
    checks.append(CheckResult("resolvent normalization", normalization, 1e-10, normalization < 1e-10))
    error = abs(tables[0].value((root,)) - 0.4)
    checks.append(CheckResult("resolvent at the root of ball(2,1)", error, 1e-12, error < 1e-12))
    return checks

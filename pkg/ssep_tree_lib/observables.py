from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .graphical.dynamics import Configuration
from .graphical.events import EventLog
from .tree import VertexAddr
from .utils import async_read_text, async_write_text, render_csv

XI_SCHEMA = "ssep-tree xi v1"
CENTERING_TOLERANCE = 1e-12


def index_to_bits(index: int, m: int) -> tuple[int, ...]:
    return tuple((index >> (m - 1 - i)) & 1 for i in range(m))


def bits_to_index(bits: Sequence[int]) -> int:
    index = 0
    for bit in bits:
        index = (index << 1) | int(bit)
    return index


class LocalFunction:
    """
    F(η) = H(η(x_1), ..., η(x_m)). entry k of `table` is H at the bits of k,
    the first site being the most significant bit
    """

    def __init__(self, sites: Sequence[VertexAddr], table: Sequence[float] | np.ndarray) -> None:
        sites = tuple(sites)
        if not sites:
            raise ValueError("A local function needs at least one site")
        if len(set(sites)) != len(sites):
            raise ValueError(f"Sites must be distinct, got {[str(x) for x in sites]}")
        if len({x.degree for x in sites}) != 1:
            raise ValueError("Sites must live on the same tree")
        table = np.array(table, dtype=np.float64)
        if table.shape != (2 ** len(sites),):
            raise ValueError(
                f"Table of a function of {len(sites)} sites needs {2 ** len(sites)} entries, "
                f"got shape {table.shape}"
            )
        if not np.all(np.isfinite(table)):
            raise ValueError("Table entries must be finite")
        table.setflags(write=False)
        self.sites = sites
        self.table = table

    @classmethod
    def from_mapping(
        cls, sites: Sequence[VertexAddr], mapping: Mapping[tuple[int, ...] | str, float]
    ) -> "LocalFunction":
        m = len(sites)
        table = [None] * (2**m)
        for key, value in mapping.items():
            bits = tuple(int(c) for c in key) if isinstance(key, str) else tuple(key)
            if len(bits) != m or any(bit not in (0, 1) for bit in bits):
                raise ValueError(f"Invalid table key {key!r} for {m} sites")
            table[bits_to_index(bits)] = float(value)
        missing = [index_to_bits(k, m) for k, value in enumerate(table) if value is None]
        if missing:
            raise ValueError(f"Table is missing keys {missing}")
        return cls(sites, table)

    @property
    def m(self) -> int:
        return len(self.sites)

    @property
    def degree(self) -> int:
        return self.sites[0].degree

    @cached_property
    def sup_norm(self) -> float:
        """
        K_H = max |H|
        """
        return float(np.abs(self.table).max())

    def value(self, bits: Sequence[int]) -> float:
        return float(self.table[bits_to_index(bits)])

    def is_zero(self) -> bool:
        return not np.any(self.table)

    def _check_same_sites(self, other: "LocalFunction") -> None:
        if self.sites != other.sites:
            raise ValueError("Local functions must share their sites to be combined")

    def __add__(self, other: "LocalFunction") -> "LocalFunction":
        self._check_same_sites(other)
        return LocalFunction(self.sites, self.table + other.table)

    def __sub__(self, other: "LocalFunction") -> "LocalFunction":
        self._check_same_sites(other)
        return LocalFunction(self.sites, self.table - other.table)

    def __mul__(self, scalar: float) -> "LocalFunction":
        return LocalFunction(self.sites, self.table * float(scalar))

    __rmul__ = __mul__

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalFunction):
            return NotImplemented
        return self.sites == other.sites and np.array_equal(self.table, other.table)

    def __hash__(self) -> int:
        return hash((self.sites, self.table.tobytes()))

    def __repr__(self) -> str:
        sites = ",".join(x.dotted() for x in self.sites)
        return f"LocalFunction(sites=[{sites}], table={self.table.tolist()})"

    def to_text(self) -> str:
        lines = ["sites: " + " ".join(x.dotted() or "." for x in self.sites)]
        for k, value in enumerate(self.table.tolist()):
            lines.append("".join(map(str, index_to_bits(k, self.m))) + f",{value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, degree: int) -> "LocalFunction":
        """
        the root is written as a single dot in the sites header
        """
        lines = [line.strip() for line in text.splitlines() if line.strip()]
        if not lines or not lines[0].startswith("sites:"):
            raise ValueError("Local function file must start with a 'sites:' line")
        words = lines[0][len("sites:") :].split()
        sites = [VertexAddr.parse("" if word == "." else word, degree) for word in words]
        mapping: dict[str, float] = {}
        for line in lines[1:]:
            bits, _, value = line.partition(",")
            if bits in mapping:
                raise ValueError(f"Duplicate table key {bits!r}")
            mapping[bits] = float(value)
        return cls.from_mapping(sites, mapping)

    def to_file(self, file_path: str | Path) -> None:
        with open(file_path, "w", encoding="utf8") as file:
            file.write(self.to_text())

    @classmethod
    def from_file(cls, file_path: str | Path, degree: int) -> "LocalFunction":
        with open(file_path, "r", encoding="utf8") as file:
            return cls.from_text(file.read(), degree)

    async def async_to_file(self, file_path: str | Path) -> None:
        await async_write_text(Path(file_path), self.to_text())

    @classmethod
    async def async_from_file(cls, file_path: str | Path, degree: int) -> "LocalFunction":
        return cls.from_text(await async_read_text(Path(file_path)), degree)


@dataclass(frozen=True)
class XiRecord:
    t: float
    xi: float
    path_id: int
    seed: str


def product_weights(m: int, p: float) -> np.ndarray:
    """
    ν_p probability of every bit pattern of m sites, in table order
    """
    ones = np.array([bin(k).count("1") for k in range(2**m)])
    return p**ones * (1 - p) ** (m - ones)


def mean_under_nu_p(F: LocalFunction, p: float) -> float:
    if not 0 < p < 1:
        raise ValueError(f"Density must lie in (0, 1), got {p}")
    return float(np.dot(F.table, product_weights(F.m, p)))


def center(F: LocalFunction, p: float) -> LocalFunction:
    return LocalFunction(F.sites, F.table - mean_under_nu_p(F, p))


def require_centered(F: LocalFunction, p: float) -> None:
    mean = mean_under_nu_p(F, p)
    if abs(mean) > CENTERING_TOLERANCE * max(1.0, F.sup_norm):
        raise ValueError(
            f"F has mean {mean!r} under nu_{p}, not 0; "
            "center it first (ssep-tree center writes the centered table)"
        )


def occupation_function(x: VertexAddr, p: float) -> LocalFunction:
    """
    F(η) = η(x) - p
    """
    if not 0 < p < 1:
        raise ValueError(f"Density must lie in (0, 1), got {p}")
    return LocalFunction((x,), (-p, 1 - p))


def product_function(sites: Sequence[VertexAddr], p: float) -> LocalFunction:
    """
    F(η) = Π η(x_i) - p^m
    """
    m = len(sites)
    table = np.zeros(2**m)
    table[-1] = 1.0
    return center(LocalFunction(sites, table), p)


def site_indices(F: LocalFunction, eta: Configuration) -> list[int]:
    """
    raises:
        ValueError: if a site of F is outside the ball of η
    """
    return [eta.ball.index_of(x) for x in F.sites]


def evaluate(F: LocalFunction, eta: Configuration) -> float:
    return float(F.table[bits_to_index(eta.occupancy[site_indices(F, eta)])])


def accumulate_xi(
    eta0: Configuration, log: EventLog, F: LocalFunction, t: float, path_id: int = 0
) -> XiRecord:
    """
    exact integral of s -> F(η_s) over [log.start, t]; the value of F is only
    recomputed at events whose edge touches a site of F
    """
    log.check_time(t)
    sites = site_indices(F, eta0)
    site_set = set(sites)
    occupancy = eta0.occupancy.tolist()
    table = F.table.tolist()

    def current() -> float:
        return table[bits_to_index([occupancy[i] for i in sites])]

    first_ends, second_ends = log.endpoint_lists
    times = log.time_list
    value = current()
    last = log.start
    xi = 0.0
    for k in range(log.count_until(t)):
        a, b = first_ends[k], second_ends[k]
        occupancy[a], occupancy[b] = occupancy[b], occupancy[a]
        if a in site_set or b in site_set:
            new_value = current()
            if new_value != value:
                xi += value * (times[k] - last)
                last = times[k]
                value = new_value
    xi += value * (t - last)
    return XiRecord(t=t, xi=xi, path_id=path_id, seed=log.provenance)


def xi_frame(records: Iterable[XiRecord]) -> pd.DataFrame:
    records = list(records)
    return pd.DataFrame(
        {
            "path_id": [r.path_id for r in records],
            "t": [r.t for r in records],
            "xi": [r.xi for r in records],
            "seed": [r.seed for r in records],
        }
    )


def render_xi_csv(records: Iterable[XiRecord]) -> str:
    return render_csv(xi_frame(records), XI_SCHEMA)

import math
from pathlib import Path
from typing import Any, Literal

try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import aiofiles
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .observables import LocalFunction, occupation_function, product_function
from .oracle import DEFAULT_SSEP_CAP, DEFAULT_TUPLE_CAP
from .tree import DEFAULT_BALL_CAP, VertexAddr, support_radius, truncation_radius

LambdaPolicy = Literal["clt", "mdp"] | float


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TreeSection(_Section):
    degree: int = Field(default=2, ge=2)
    radius: int | Literal["auto"] = "auto"
    truncation_c: float = Field(default=3.0, ge=0)

    @model_validator(mode="after")
    def check_radius(self) -> Self:
        if isinstance(self.radius, int) and self.radius < 1:
            raise ValueError(f"radius must be at least 1 or 'auto', got {self.radius}")
        return self


class FunctionSection(_Section):
    """
    sites are dotted words, the root being the empty string
    """

    kind: Literal["occupation", "product", "table", "file"] = "occupation"
    sites: list[str] = Field(default_factory=lambda: [""])
    table: dict[str, float] | None = None
    path: Path | None = None

    @model_validator(mode="after")
    def check_kind(self) -> Self:
        if not self.sites:
            raise ValueError("function needs at least one site")
        if len(set(self.sites)) != len(self.sites):
            raise ValueError(f"function sites must be distinct, got {self.sites}")
        if self.kind == "occupation" and len(self.sites) != 1:
            raise ValueError("an occupation function has exactly one site")
        if self.kind == "table" and self.table is None:
            raise ValueError("function kind 'table' needs a table")
        if self.kind == "file" and self.path is None:
            raise ValueError("function kind 'file' needs a path")
        return self


class ScheduleSection(_Section):
    t_grid: list[float] = Field(default_factory=lambda: [40.0])
    n_scale: int = Field(default=50, ge=1)
    clt_t: float = Field(default=1.0, gt=0)
    duality_cutoff: float | None = Field(default=None, gt=0)
    duality_tolerance: float = Field(default=1e-3, gt=0)
    duality_reps: int = Field(default=2000, ge=2)
    decompose_t: float = Field(default=5.0, gt=0)
    batch_size: int = Field(default=250, ge=1)

    @model_validator(mode="after")
    def check_times(self) -> Self:
        if any(not t > 0 for t in self.t_grid):
            raise ValueError(f"t_grid entries must be positive, got {self.t_grid}")
        return self


class MdpSection(_Section):
    gamma: float = Field(default=0.7, gt=0.5, lt=1.0)
    t_grid: list[float] = Field(default_factory=lambda: [50.0, 200.0])
    u_grid: list[float] = Field(default_factory=lambda: [0.5, 1.0])
    c_grid: list[float] = Field(default_factory=lambda: [-0.5, -0.25, 0.25, 0.5])

    def a_t(self, t: float) -> float:
        return t**self.gamma


class CapsSection(_Section):
    ball_vertices: int = Field(default=DEFAULT_BALL_CAP, ge=1)
    ssep_states: int = Field(default=DEFAULT_SSEP_CAP, ge=1)
    tuple_states: int = Field(default=DEFAULT_TUPLE_CAP, ge=1)


class ExperimentConfig(_Section):
    tree: TreeSection = Field(default_factory=TreeSection)
    function: FunctionSection = Field(default_factory=FunctionSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    mdp: MdpSection = Field(default_factory=MdpSection)
    caps: CapsSection = Field(default_factory=CapsSection)
    p: float = Field(default=0.5, gt=0, lt=1)
    seed: int = Field(default=20240101, ge=0, lt=2**64)
    replicates: int = Field(default=1000, ge=1)
    lambda_policy: LambdaPolicy = "clt"

    @model_validator(mode="after")
    def check_cross_fields(self) -> Self:
        if isinstance(self.lambda_policy, float) and not self.lambda_policy > 0:
            raise ValueError(f"lambda_policy must be 'clt', 'mdp' or a positive number, got {self.lambda_policy}")
        sites = self.sites()
        if self.tree.radius == "auto":
            if not self.schedule.t_grid:
                raise ValueError("radius 'auto' needs a nonempty schedule.t_grid")
        elif support_radius(sites) > self.tree.radius:
            raise ValueError(
                f"function sites reach depth {support_radius(sites)}, beyond radius {self.tree.radius}"
            )
        return self

    @classmethod
    def from_dict(cls, config_dict: dict[Any, Any] | None) -> "ExperimentConfig":
        if config_dict is None:
            config_dict = {}
        if not isinstance(config_dict, dict):
            raise ValueError(f"Config must be a mapping, got {type(config_dict).__name__}")
        return cls(**config_dict)

    @classmethod
    def from_file(cls, file_path: str | Path) -> "ExperimentConfig":
        with open(file_path, "r", encoding="utf8") as file:
            return cls.from_dict(yaml.load(file, Loader=yaml.CSafeLoader))

    @classmethod
    async def async_from_file(cls, file_path: str | Path) -> "ExperimentConfig":
        async with aiofiles.open(file_path, "r", encoding="utf8") as file:
            return cls.from_dict(yaml.load(await file.read(), Loader=yaml.CSafeLoader))

    def to_dict(self) -> dict[Any, Any]:
        return self.model_dump(mode="json", exclude_none=True)

    def to_yaml(self) -> str:
        return yaml.dump(self.to_dict(), Dumper=yaml.CSafeDumper, sort_keys=False)

    def to_file(self, file_path: str | Path) -> None:
        with open(file_path, "w", encoding="utf8") as file:
            file.write(self.to_yaml())

    async def async_to_file(self, file_path: str | Path) -> None:
        async with aiofiles.open(file_path, "w", encoding="utf8") as file:
            await file.write(self.to_yaml())

    def sites(self) -> list[VertexAddr]:
        return [VertexAddr.parse(site, self.tree.degree) for site in self.function.sites]

    def local_function(self) -> LocalFunction:
        """
        raises:
            FileNotFoundError: if a 'file' function points at a missing file
        """
        sites = self.sites()
        match self.function.kind:
            case "occupation":
                return occupation_function(sites[0], self.p)
            case "product":
                return product_function(sites, self.p)
            case "table":
                return LocalFunction.from_mapping(sites, self.function.table or {})
            case "file":
                return LocalFunction.from_file(self.function.path, self.tree.degree)  # type: ignore

    def radius_for(self, horizon: float) -> int:
        """
        the configured radius, or the truncation radius for dual walks run
        up to `horizon` from the deepest site
        """
        if self.tree.radius != "auto":
            return self.tree.radius
        r0 = support_radius(self.local_function().sites)
        return truncation_radius(self.tree.degree, r0, horizon, self.tree.truncation_c)

    def lam_for(self, t: float, policy: LambdaPolicy | None = None) -> float:
        """
        'clt' gives 1/N, 'mdp' gives t^{-1/2}, a number is used as is
        """
        policy = self.lambda_policy if policy is None else policy
        if policy == "clt":
            return 1 / self.schedule.n_scale
        if policy == "mdp":
            return 1 / math.sqrt(t)
        return float(policy)

    def resolved(self, horizon: float) -> "ExperimentConfig":
        return self.model_copy(
            update={"tree": self.tree.model_copy(update={"radius": self.radius_for(horizon)})}
        )


class RuntimeSettings(BaseSettings):
    """
    the only knobs taken from the environment: SSEP_OUTPUT_DIR and SSEP_WORKERS
    """

    model_config = SettingsConfigDict(env_prefix="SSEP_")

    output_dir: Path = Path("ssep_output")
    workers: int = Field(default=1, ge=1)

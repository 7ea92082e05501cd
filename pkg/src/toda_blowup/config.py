"""Experiment configuration: TOML in, validated dataclasses out."""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigurationError
from .mesh import DomainSpec

__all__ = ["ExperimentConfig", "load_config", "dump_config"]


@dataclass
class DomainConfig:
    kind: str = "unit-disk"
    width: float = 1.0
    height: float = 1.0
    vertices: list = field(default_factory=list)

    def spec(self) -> DomainSpec:
        try:
            if self.kind == "unit-disk":
                return DomainSpec.unit_disk()
            if self.kind == "rectangle":
                return DomainSpec.rectangle(self.width, self.height)
            if self.kind == "polygon":
                return DomainSpec.polygon(self.vertices)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        raise ConfigurationError(f"unknown domain kind {self.kind!r}")


@dataclass
class MeshConfig:
    h_target: float = 0.05
    refinement_levels: int = 3
    grading: float = 0.25
    quadrature: str = "deg5"


@dataclass
class LadderConfig:
    lambda_start: float = 1e-2
    lambda_min: float = 1e-5
    shrink: float = 0.5


@dataclass
class ToleranceConfig:
    newton_rtol: float = 1e-9
    meanfield_gtol: float = 1e-10
    # 0 selects the default for the Green mode in use
    critical_tol: float = 0.0


@dataclass
class ScanConfig:
    grid_points: int = 9
    multistart: int = 6
    green_pairs: int = 50
    residual_lambdas: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4, 1e-5])
    dump_states: bool = False


_SECTIONS = {
    "domain": DomainConfig,
    "mesh": MeshConfig,
    "ladder": LadderConfig,
    "tolerances": ToleranceConfig,
    "scan": ScanConfig,
}


@dataclass
class ExperimentConfig:
    """Everything a run needs. ``xi`` is ``"auto"`` (use the critical point
    found by multistart) or a list of ``k`` points."""

    k: int = 1
    rho2: float = 0.5
    xi: Any = "auto"
    seed: int = 0
    output_dir: str = "out"
    green_mode: str = "auto"
    domain: DomainConfig = field(default_factory=DomainConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigurationError("k must be a positive integer")
        if not self.rho2 >= 0:
            raise ConfigurationError("rho2 must be non-negative")
        lad = self.ladder
        if not (0 < lad.lambda_min < lad.lambda_start <= 1e-1):
            raise ConfigurationError("λ ladder must be strictly decreasing with 0 < lambda_min < lambda_start ≤ 0.1")
        if not (0.3 < lad.shrink < 0.9):
            raise ConfigurationError("ladder shrink factor must lie in (0.3, 0.9)")
        if self.xi != "auto":
            try:
                pts = [[float(a), float(b)] for a, b in self.xi]
            except (TypeError, ValueError) as exc:
                raise ConfigurationError("xi must be 'auto' or a list of [x, y] pairs") from exc
            if len(pts) != self.k:
                raise ConfigurationError(f"xi lists {len(pts)} points but k = {self.k}")
            self.xi = pts
        if self.green_mode not in ("auto", "analytic-disk", "numeric"):
            raise ConfigurationError(f"unknown green_mode {self.green_mode!r}")
        if self.mesh.h_target <= 0:
            raise ConfigurationError("mesh.h_target must be positive")
        self.domain_spec()

    def domain_spec(self) -> DomainSpec:
        return self.domain.spec()

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["domain"]["kind"] != "polygon":
            d["domain"].pop("vertices")
        return d

    def hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        top = {f.name for f in fields(cls)}
        unknown = set(data) - top
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in data.items():
            if name in _SECTIONS:
                section = _SECTIONS[name]
                if not isinstance(value, dict):
                    raise ConfigurationError(f"[{name}] must be a table")
                allowed = {f.name for f in fields(section)}
                bad = set(value) - allowed
                if bad:
                    raise ConfigurationError(f"unknown keys in [{name}]: {sorted(bad)}")
                kwargs[name] = section(**value)
            else:
                kwargs[name] = value
        return cls(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())

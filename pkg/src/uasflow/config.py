"""Scenario file schema and strict YAML loading with line-precise errors."""

from __future__ import annotations

import hashlib
import json
import math
import re
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from uasflow.errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]


class RegionSpec(_Strict):
    name: str
    kind: Literal["circle", "rectangle", "oval"]
    center: Vec2
    radius: Optional[float] = None
    half_extents: Optional[Vec2] = None
    delta: Optional[float] = None
    half_separation: Optional[float] = None
    floors: Optional[list[int]] = None


class GeometrySpec(_Strict):
    outer_min: Vec2
    outer_max: Vec2
    regions: list[RegionSpec] = Field(default_factory=list)


class SurfaceSpec(_Strict):
    kind: Literal["flat", "paraboloid"] = "flat"
    z0: float = 0.0
    curvature: float = 0.0
    center: Vec2 = (0.0, 0.0)


class UniformSpec(_Strict):
    u_inf: float = Field(gt=0)
    theta0: float = 0.0


class ElementSpec(_Strict):
    kind: Literal["uniform", "source", "sink", "doublet"]
    strength: float = Field(gt=0)
    theta0: float = 0.0
    center: Optional[Vec2] = None
    region: Optional[str] = None


class FloorSpec(_Strict):
    index: int = Field(ge=1)
    surface: SurfaceSpec = Field(default_factory=SurfaceSpec)
    xi: Literal[0, 1] = 1
    gamma: dict[str, Literal[0, 1]] = Field(default_factory=dict)
    uniform: Optional[UniformSpec] = None
    elements: Optional[list[ElementSpec]] = None
    cost: float = Field(default=1.0, gt=0)

    @model_validator(mode="after")
    def _flow_given(self):
        if self.uniform is None and self.elements is None:
            raise ValueError("give either 'uniform' (elements derived from regions) or an explicit 'elements' list")
        return self


class GridSpec(_Strict):
    spacing: float = Field(gt=0)
    floor: int = 1
    boundary: Literal["stream", "potential"] = "stream"
    treatment: Literal["shortley-weller", "staircase"] = "shortley-weller"


class SpeedClassSpec(_Strict):
    name: str
    speed: float = Field(gt=0)
    band: Vec2

    @field_validator("band")
    @classmethod
    def _ordered(cls, v):
        if not v[0] < v[1]:
            raise ValueError("band must satisfy psi_lo < psi_hi")
        return v


class ClusterSpec(_Strict):
    id: str
    floor: int = 1
    entry_time: float = Field(default=0.0, ge=0)
    speed: Optional[float] = Field(default=None, gt=0)
    entry: Optional[Vec2] = None
    entry_psi: Optional[float] = None
    dimension: int = Field(default=0, ge=0, le=3)
    agents: int = Field(default=1, ge=1)
    table: Optional[Literal["ten_agent"]] = None
    leaders: Optional[list[Vec3]] = None
    material: Optional[list[Vec3]] = None
    neighbors: dict[int, list[int]] = Field(default_factory=dict)
    weights: dict[int, list[float]] = Field(default_factory=dict)
    beta1: float = Field(default=4.0, gt=0)
    beta2: float = Field(default=4.0, gt=0)
    initial_offset: float = Field(default=0.0, ge=0)


class EventSpec(_Strict):
    time: float = Field(ge=0)
    region: RegionSpec


class ControlSpec(_Strict):
    we: float = Field(default=1.0, ge=0)
    wu: float = Field(default=1.0, gt=0)
    k_p: float = Field(default=1.0, gt=0)
    k_u: Union[float, dict[str, float]] = 1.0
    recovery_threshold: float = Field(default=0.05, gt=0, lt=1)


class IntegrationSpec(_Strict):
    dt: float = Field(gt=0)
    horizon: float = Field(gt=0)
    hold: float = Field(default=0.0, ge=0)


class OutputSpec(_Strict):
    snapshot_times: list[float] = Field(default_factory=list)
    velocity_samples: tuple[int, int] = (21, 21)
    channel_arc_step: float = Field(default=0.5, gt=0)
    channel_levels: list[float] = Field(default_factory=list)


class ScenarioConfig(_Strict):
    name: str
    geometry: GeometrySpec
    floors: list[FloorSpec]
    grid: Optional[GridSpec] = None
    speed_classes: list[SpeedClassSpec] = Field(default_factory=list)
    clusters: list[ClusterSpec] = Field(default_factory=list)
    events: list[EventSpec] = Field(default_factory=list)
    control: ControlSpec = Field(default_factory=ControlSpec)
    integration: IntegrationSpec
    outputs: OutputSpec = Field(default_factory=OutputSpec)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _cross_checks(self):
        if not self.floors:
            raise ValueError("at least one floor is required")
        horizon = self.integration.horizon
        for i, ev in enumerate(self.events):
            if ev.time > horizon:
                raise ValueError(f"@events.{i}.time@ event time {ev.time} lies beyond the horizon {horizon}")
        for i, t in enumerate(self.outputs.snapshot_times):
            if not (0.0 <= t <= horizon + 1e-12):
                raise ValueError(f"@outputs.snapshot_times.{i}@ snapshot time {t} lies outside [0, {horizon}]")
        for i, c in enumerate(self.clusters):
            if c.entry_time > horizon:
                raise ValueError(f"@clusters.{i}.entry_time@ entry time {c.entry_time} lies beyond the horizon")
        for i, sc in enumerate(self.speed_classes):
            for j, other in enumerate(self.speed_classes[i + 1 :], i + 1):
                if sc.speed != other.speed and sc.band[0] < other.band[1] and other.band[0] < sc.band[1]:
                    raise ValueError(f"@speed_classes.{j}.band@ bands of {sc.name!r} and {other.name!r} overlap")
        return self


# -- loading -------------------------------------------------------------------
def _line_of(node: yaml.Node | None, loc: tuple) -> int | None:
    """Line (1-based) of the YAML node addressed by a validation location."""
    last = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if str(k.value) == str(key):
                    nxt = v
                    last = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            last = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return last


_CROSS_LOC = re.compile(r"@([\w.]+)@\s*")


def _format_errors(exc: ValidationError, root: yaml.Node | None, source: str) -> str:
    lines = []
    for err in exc.errors():
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        msg = err["msg"]
        hit = _CROSS_LOC.search(msg)
        if hit:
            # cross-field checks name their own location as "@a.0.b@"
            loc = loc + tuple(int(t) if t.isdigit() else t for t in hit.group(1).split("."))
            msg = _CROSS_LOC.sub("", msg).replace("Value error, ", "").strip()
        line = _line_of(root, loc)
        where = ".".join(str(p) for p in loc) or "<root>"
        lines.append(f"{source}:{line or '?'}: {where}: {msg}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<spec>") -> ScenarioConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigurationError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{source}:1: scenario file must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_errors(exc, root, source)) from exc


def load_config(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file {p}: {exc.strerror}") from exc
    return parse_config(text, str(p))


def _canonical(obj: Any) -> Any:
    if isinstance(obj, float) and math.isfinite(obj) and obj == int(obj):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def config_hash(cfg: ScenarioConfig) -> str:
    """SHA-256 of the canonical JSON form of a validated scenario."""
    blob = json.dumps(_canonical(cfg.model_dump(mode="json")), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

"""Scenario files: JSON documents with topology, zones, DG settings, prices, events, params."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

EVENT_KINDS = ("dg_outage_start", "dg_outage_end", "irradiance_set", "load_set", "actuation_fault")
BUNDLED = ("ieee_4zone", "ieee_4zone_overvoltage", "kcm_microgrid")


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    def __init__(self, msg: str, line: int | None = None, field: str | None = None):
        super().__init__(msg)
        self.line = line
        self.field = field


class ValidationError(ScenarioError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BusSpec(_Strict):
    id: int
    v_min: float = 0.95
    v_max: float = 1.05
    load_p: float = 0.0
    load_q: float = 0.0


class LineSpec(_Strict):
    id: str
    from_bus: int = Field(alias="from")
    to_bus: int = Field(alias="to")
    r: float = Field(ge=0)
    x: float = Field(ge=0)
    i_cap: float = Field(default=10.0, gt=0)


class Topology(_Strict):
    root: int
    buses: list[BusSpec]
    lines: list[LineSpec]


class ZoneSpec(_Strict):
    id: int
    buses: list[int]
    lines: Optional[list[str]] = None
    pzc: dict[int, int]
    bid_markup: float = Field(default=0.0, gt=-1)
    subcontract_above: Optional[float] = None
    local_mitigation: bool = True
    target_margin: float = Field(default=0.0, ge=0)


class DGSpec(_Strict):
    zone: int
    id: str
    bus: int
    kind: Literal["generator", "storage", "load-bank"] = "generator"
    p_max: float = Field(ge=0)
    q_max: float = Field(ge=0)
    s_max: Optional[float] = None
    pr_q: float = Field(ge=0)
    alpha: float = Field(ge=0)
    p_set: float = 0.0
    q_set: float = 0.0
    p_avail: Optional[float] = None


class EventSpec(_Strict):
    step: int = Field(ge=0)
    kind: Literal[EVENT_KINDS]  # type: ignore[valid-type]
    device: Optional[str] = None
    bus: Optional[int] = None
    zone: Optional[int] = None
    value: Optional[float] = None
    p: Optional[float] = None
    q: Optional[float] = None

    @model_validator(mode="after")
    def _fields_for_kind(self):
        need = {"dg_outage_start": ("device",), "dg_outage_end": ("device",),
                "irradiance_set": ("device", "value"), "load_set": ("bus", "p", "q"),
                "actuation_fault": ("zone",)}[self.kind]
        missing = [f for f in need if getattr(self, f) is None]
        if missing:
            raise ValueError(f"{self.kind} event needs {missing}")
        return self


class Params(_Strict):
    gamma_success: float = 1.0
    gamma_fail: float = -10.0
    tol_abs: float = Field(default=0.0005, ge=0)
    bid_weighting: Literal["divide", "multiply"] = "divide"
    g_floor: float = Field(default=0.1, gt=0)
    B_M: int = Field(default=128, ge=1)
    genesis_funding: float = Field(default=10000.0, ge=0)
    dt_hours: float = Field(default=5 / 60, gt=0)
    steps: int = Field(default=144, ge=1)
    seed: int = 0
    bid_window: int = Field(default=3, ge=1)
    enforce_window: int = Field(default=12, ge=1)
    service_steps: int = Field(default=24, ge=1)
    dv_resolution: float = Field(default=1e-4, gt=0)
    nodes: int = Field(default=4, ge=1)
    latency: int = Field(default=0, ge=0)
    start_hour: float = 6.0

    @model_validator(mode="after")
    def _gamma_signs(self):
        if not self.gamma_fail < 0 < self.gamma_success:
            raise ValueError("need gamma_fail < 0 < gamma_success")
        return self


class ScenarioConfig(_Strict):
    name: str = "scenario"
    description: str = ""
    topology: Topology
    zones: list[ZoneSpec]
    dg_settings: list[DGSpec]
    price_series: list[float] = Field(min_length=1)
    events: list[EventSpec] = []
    params: Params = Params()

    @model_validator(mode="after")
    def _cross_refs(self):
        buses = {b.id for b in self.topology.buses}
        lines = {ln.id for ln in self.topology.lines}
        zones = {z.id for z in self.zones}
        devices = {d.id for d in self.dg_settings}
        if self.topology.root not in buses:
            raise ValueError(f"root bus {self.topology.root} is not a bus")
        for ln in self.topology.lines:
            for end in (ln.from_bus, ln.to_bus):
                if end not in buses:
                    raise ValueError(f"line {ln.id} references unknown bus {end}")
        for z in self.zones:
            for b in z.buses:
                if b not in buses:
                    raise ValueError(f"zone {z.id} references unknown bus {b}")
            for ln in z.lines or ():
                if ln not in lines:
                    raise ValueError(f"zone {z.id} references unknown line {ln}")
            for nb, bus in z.pzc.items():
                if nb not in zones:
                    raise ValueError(f"zone {z.id} couples to unknown zone {nb}")
                if bus not in z.buses:
                    raise ValueError(f"zone {z.id} PZC bus {bus} is outside the zone")
                other = next(o for o in self.zones if o.id == nb)
                if other.pzc.get(z.id) != bus:
                    raise ValueError(f"zones {z.id} and {nb} disagree on their PZC")
        per_zone = {}
        for d in self.dg_settings:
            if d.zone not in zones:
                raise ValueError(f"device {d.id} in unknown zone {d.zone}")
            if d.bus not in buses:
                raise ValueError(f"device {d.id} on unknown bus {d.bus}")
            zone = next(z for z in self.zones if z.id == d.zone)
            if d.bus not in zone.buses:
                raise ValueError(f"device {d.id} is not on a bus of zone {d.zone}")
            per_zone.setdefault(d.zone, []).append(d.id)
        for z in zones:
            if len(per_zone.get(z, ())) != 1:
                raise ValueError(f"zone {z} needs exactly one dispatchable device")
        for ev in self.events:
            if ev.device is not None and ev.device not in devices:
                raise ValueError(f"event at step {ev.step} references unknown device {ev.device}")
            if ev.bus is not None and ev.bus not in buses:
                raise ValueError(f"event at step {ev.step} references unknown bus {ev.bus}")
            if ev.zone is not None and ev.zone not in zones:
                raise ValueError(f"event at step {ev.step} references unknown zone {ev.zone}")
        return self


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {exc.msg}", line=exc.lineno) from None
    try:
        return ScenarioConfig.model_validate(raw)
    except PydanticValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        raise ValidationError(f"{where}: {err['msg']}") from None


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("voltchain") / "scenarios" / f"{name}.json"))


def load_scenario(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        p = bundled_path(str(path))
    if not p.exists():
        raise ParseError(f"scenario file not found: {path}")
    return parse_scenario(p.read_text())

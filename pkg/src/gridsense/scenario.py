"""Scenario files: TOML with [system] [fleet] [event] [noise] [run] and optional [agent].

Unknown keys are rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import calibration
from .sfr import InvalidInputError, NoiseModel, SystemParams


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario file."""


@dataclass(frozen=True)
class FleetSpec:
    outlets: int = 100_000
    groups: int = 1000
    watts_min: float = 10.0
    watts_max: float = 1800.0
    represented_outlets: int = 1_000_000
    non_responder_fraction: float = 0.0

    @property
    def per_group(self) -> int:
        return self.outlets // self.groups

    @property
    def weight(self) -> float:
        return self.represented_outlets / self.outlets


@dataclass(frozen=True)
class EventSpec:
    loss_mw: float = 500.0
    time: float = 0.0


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "uniform"
    magnitude: float = 0.01
    param_noise: float = 0.0

    def model(self, magnitude: float | None = None) -> NoiseModel:
        return NoiseModel(self.kind, self.magnitude if magnitude is None else magnitude)


@dataclass(frozen=True)
class RunSpec:
    trials: int = 10_000
    seed: int = 20240601
    duration_s: float = 5.0
    report_base_mva: float = 100.0
    # closed loop
    closed_loop_outlets: int = 10_000
    closed_loop_duration_s: float = 10.0
    pre_event_s: float = 0.0
    backup_enabled: bool = True
    center_delay_s: float = 2.0
    command_latency_s: tuple[float, float] = (0.05, 0.2)
    bundle_latency_s: tuple[float, float] = (0.05, 0.2)
    telemetry_latency_s: tuple[float, float] = (0.05, 0.2)
    post_event_drop: float = 0.0


@dataclass(frozen=True)
class AgentSpec:
    detect_consecutive: int = 5
    lse_window: int = 10
    ekf_iterations: int = 40
    n_required: int = 15
    rocof_window: int = 15
    q_dp: float = 1e-6
    q_tx: float = 1e-8
    p0_dp_rel: float = 0.2
    p0_tx: float = 0.07


@dataclass(frozen=True)
class Scenario:
    name: str
    system: SystemParams
    f_s: float = 49.5
    bin_width: float = 0.05
    event: EventSpec = field(default_factory=EventSpec)
    fleet: FleetSpec = field(default_factory=FleetSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    run: RunSpec = field(default_factory=RunSpec)
    agent: AgentSpec = field(default_factory=AgentSpec)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **kw: Any) -> Scenario:
        return _apply_overrides(self, kw)


# ---------------------------------------------------------------------------
# IEEE-24 defaults

IEEE24_H = 11.064727757509742
IEEE24_R = 0.03651746401631439
IEEE24_S_BASE = 2289.5706236605533


def ieee24_system(**kw: Any) -> SystemParams:
    base = dict(
        h=IEEE24_H,
        d=calibration.D,
        r=IEEE24_R,
        km=calibration.KM,
        fh=calibration.FH,
        tr=calibration.TR,
        s_base=IEEE24_S_BASE,
        f_nominal=calibration.F_NOMINAL,
        p_load_total=calibration.P_LOAD_TOTAL_MW,
    )
    base.update(kw)
    return SystemParams(**base)


def build_ieee24(**overrides: Any) -> Scenario:
    """Modified IEEE 24-bus case with calibrated (h, r, s_base).

    Overrides use section-qualified names (``noise__magnitude=0.005``) or
    top-level fields (``f_s=50.0``). ``f_s`` equal to nominal is allowed and
    yields a zero threshold loss.
    """
    sc = Scenario(name="ieee24", system=ieee24_system())
    return _apply_overrides(sc, overrides)


def _apply_overrides(sc: Scenario, overrides: Mapping[str, Any]) -> Scenario:
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, val in overrides.items():
        if "__" in key:
            sec, name = key.split("__", 1)
            sections.setdefault(sec, {})[name] = val
        else:
            top[key] = val
    for sec, kv in sections.items():
        cur = getattr(sc, sec, None)
        if cur is None:
            raise ScenarioError(f"unknown section {sec!r}")
        valid = {f.name for f in fields(cur)}
        bad = set(kv) - valid
        if bad:
            raise ScenarioError(f"unknown keys in [{sec}]: {sorted(bad)}")
        top[sec] = replace(cur, **kv)
    try:
        return replace(sc, **top)
    except TypeError as exc:
        raise ScenarioError(str(exc)) from None


# ---------------------------------------------------------------------------
# file IO


def _take(d: dict, cls, section: str):
    valid = {f.name: f for f in fields(cls)}
    bad = set(d) - set(valid)
    if bad:
        raise ScenarioError(f"unknown keys in [{section}]: {sorted(bad)}")
    kw = {}
    for k, v in d.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, InvalidInputError) as exc:
        raise ScenarioError(f"[{section}]: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(raw, default_name=path.stem)


def scenario_from_dict(raw: Mapping[str, Any], default_name: str = "scenario") -> Scenario:
    allowed = {"name", "system", "fleet", "event", "noise", "run", "agent"}
    bad = set(raw) - allowed
    if bad:
        raise ScenarioError(f"unknown top-level keys: {sorted(bad)}")
    name = raw.get("name", default_name)
    sysd = dict(raw.get("system", {}))
    f_s = float(sysd.pop("f_s", 49.5))
    bin_width = float(sysd.pop("bin_width", 0.05))
    fleet_units = sysd.pop("units", None)
    if fleet_units is not None:
        if fleet_units != "rts79-no-bus23":
            raise ScenarioError(f"[system] unknown unit list {fleet_units!r}")
        if "h" in sysd or "r" in sysd:
            raise ScenarioError("[system] give either units or (h, r), not both")
        s_base = sysd.get("s_base")
        if s_base is None:
            raise ScenarioError("[system] units require s_base")
        h, r = calibration.fleet_aggregate(float(s_base))
        sysd["h"], sysd["r"] = h, r
    system = _take(sysd, SystemParams, "system")
    return Scenario(
        name=name,
        system=system,
        f_s=f_s,
        bin_width=bin_width,
        event=_take(dict(raw.get("event", {})), EventSpec, "event"),
        fleet=_take(dict(raw.get("fleet", {})), FleetSpec, "fleet"),
        noise=_take(dict(raw.get("noise", {})), NoiseSpec, "noise"),
        run=_take(dict(raw.get("run", {})), RunSpec, "run"),
        agent=_take(dict(raw.get("agent", {})), AgentSpec, "agent"),
    )


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def dump_scenario(sc: Scenario) -> str:
    out = [f"name = {json.dumps(sc.name)}", "", "[system]"]
    for k, v in asdict(sc.system).items():
        out.append(f"{k} = {_toml_value(v)}")
    out.append(f"f_s = {_toml_value(sc.f_s)}")
    out.append(f"bin_width = {_toml_value(sc.bin_width)}")
    for sec in ("event", "fleet", "noise", "run", "agent"):
        out += ["", f"[{sec}]"]
        for k, v in asdict(getattr(sc, sec)).items():
            out.append(f"{k} = {_toml_value(v)}")
    return "\n".join(out) + "\n"

"""Smart-outlet state machine.

Each agent sees only its own 16 ms frequency stream and the parameter
bundle it received before the event. Pipeline per episode::

    Idle -> EventDetected (LSE window) -> Estimating (EKF) -> ShedDecided | Off

The backup frequency check runs on every sample regardless of phase.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Sequence

import numpy as np

from .control import EstimatorModel, ParameterBundle, ShedConditionTable
from .sfr import SAMPLE_PERIOD, FrequencySample, InvalidInputError

SWITCH_OFF = "SwitchOff"
STAY_ON = "StayOn"

CAUSE_DETECTED = "event_detected"
CAUSE_LSE = "lse_done"
CAUSE_STAY_ON = "stay_on"
CAUSE_LOCAL = "local_estimate"  # criterion 1
CAUSE_BACKUP = "backup_frequency"  # criterion 2
CAUSE_COMMAND_OFF = "command_off"  # criterion 3
CAUSE_COMMAND_ON = "command_on"
CAUSE_RECOVERED = "recovered"

DECISION_LOG_HEADER = ("t_s", "outlet_id", "phase", "cause", "delta_p_est_pu")


class Phase(str, Enum):
    IDLE = "Idle"
    EVENT_DETECTED = "EventDetected"
    ESTIMATING = "Estimating"
    SHED_DECIDED = "ShedDecided"
    OFF = "Off"


class NoBundleError(RuntimeError):
    def __init__(self, msg: str = "no parameter bundle"):
        super().__init__(msg)


class OutOfOrderSampleError(ValueError):
    pass


class NumericalFailureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AgentConfig:
    bundle: ParameterBundle | None = None
    detect_consecutive: int = 5
    lse_window: int = 10
    ekf_iterations: int = 40
    n_required: int = 15
    rocof_window: int = 15
    q_cov: tuple[float, float] = (1e-6, 1e-8)
    p0_dp_rel: float = 0.2
    p0_dp_floor: float = 1e-3
    p0_tx: float = 0.07
    r_meas: float = 0.01**2 / 3.0  # Hz^2
    recover_band_hz: float = 0.05
    recover_hold: int = 5
    backup_enabled: bool = True
    sample_period: float = SAMPLE_PERIOD
    report_base_mva: float = 100.0
    model: EstimatorModel | None = None  # overrides bundle.model (parameter-error studies)

    def __post_init__(self) -> None:
        for name in ("detect_consecutive", "lse_window", "ekf_iterations", "n_required"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.rocof_window < 2:
            raise InvalidInputError("rocof_window must be >= 2")
        if self.r_meas <= 0:
            raise InvalidInputError("r_meas must be > 0")


# ---------------------------------------------------------------------------
# pure building blocks


def detect_event(buffer: Sequence[float | FrequencySample], n: int = 5) -> bool:
    """True iff the last ``n`` successive differences are all strictly negative."""
    if len(buffer) < n + 1:
        raise InvalidInputError(f"need at least {n + 1} samples, got {len(buffer)}")
    vals = [s.f if isinstance(s, FrequencySample) else float(s) for s in buffer[-(n + 1) :]]
    return all(b < a for a, b in zip(vals, vals[1:]))


def centred_slope_weights(n: int, dt: float = SAMPLE_PERIOD) -> tuple[float, ...]:
    c = (n - 1) / 2.0
    sxx = sum((i - c) ** 2 for i in range(n))
    return tuple((i - c) / (sxx * dt) for i in range(n))


def window_rocof(freqs: Sequence[float], dt: float = SAMPLE_PERIOD) -> tuple[float, float]:
    """Least-squares line through equally spaced samples.

    Returns (fitted frequency at the window centre, slope in Hz/s). The
    centre value is the window mean, so it carries no lag relative to the slope.
    """
    w = centred_slope_weights(len(freqs), dt)
    return sum(freqs) / len(freqs), sum(a * b for a, b in zip(w, freqs))


def check_condition(
    table: ShedConditionTable, f: float, rocof: float, hits: int, n_required: int | None = None
) -> tuple[int, bool]:
    if table.satisfied(f, rocof):
        hits += 1
    need = table.n_required if n_required is None else n_required
    return hits, hits >= need


def ols_slope(t: Sequence[float], f: Sequence[float]) -> float:
    n = len(t)
    if n < 2:
        raise InvalidInputError("need at least two samples")
    mt = sum(t) / n
    mf = sum(f) / n
    sxx = sum((a - mt) ** 2 for a in t)
    if sxx == 0:
        raise InvalidInputError("degenerate timestamps")
    return sum((a - mt) * (b - mf) for a, b in zip(t, f)) / sxx


def lse_estimate(
    samples: Sequence[FrequencySample] | tuple[Sequence[float], Sequence[float]],
    k_lse: float,
    f_nominal: float,
) -> float:
    """Initial loss estimate (system p.u.) from the OLS ROCOF of the window."""
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], FrequencySample):
        t, f = samples
    else:
        t = [s.t for s in samples]
        f = [s.f for s in samples]
    return k_lse * ols_slope(t, f) / f_nominal


@dataclass(frozen=True)
class EkfState:
    """State (dP in system p.u., t_x in s) with symmetric covariance (p00, p01, p11)."""

    x: tuple[float, float]
    p_cov: tuple[float, float, float]
    q_cov: tuple[float, float]
    r_meas: float
    k: int = 0

    @property
    def P(self) -> np.ndarray:
        a, b, c = self.p_cov
        return np.array([[a, b], [b, c]])

    @property
    def delta_p(self) -> float:
        return self.x[0]

    @property
    def t_x(self) -> float:
        return self.x[1]


def ekf_init(lse_result: float, detect_time: float, config: AgentConfig) -> EkfState:
    tx0 = detect_time - config.detect_consecutive * config.sample_period
    sd_dp = max(config.p0_dp_rel * abs(lse_result), config.p0_dp_floor)
    return EkfState(
        x=(float(lse_result), float(tx0)),
        p_cov=(sd_dp**2, 0.0, config.p0_tx**2),
        q_cov=tuple(config.q_cov),
        r_meas=config.r_meas,
        k=0,
    )


def measurement(model: EstimatorModel, dp: float, tx: float, t: float) -> float:
    """Predicted frequency (Hz) for state (dp, tx) at time t."""
    tau = t - tx
    g2 = model.g2 * math.exp(-model.sigma * tau)
    return model.f_nominal * (1.0 + model.g1 * dp + g2 * dp * math.sin(model.omega_r * tau + model.phi))


def ekf_step(ekf: EkfState, sample: FrequencySample | tuple[float, float], model: EstimatorModel) -> EkfState:
    """One predict/update with identity transition and the nonlinear observation."""
    if isinstance(sample, FrequencySample):
        t, z = sample.t, sample.f
    else:
        t, z = sample
    dp, tx = ekf.x
    p00, p01, p11 = ekf.p_cov
    p00 += ekf.q_cov[0]
    p11 += ekf.q_cov[1]

    fn = model.f_nominal
    sig = model.sigma
    wr = model.omega_r
    tau = t - tx
    e = math.exp(-sig * tau)
    g3 = wr * tau + model.phi
    s3 = math.sin(g3)
    c3 = math.cos(g3)
    g2 = model.g2 * e
    h = fn * (1.0 + model.g1 * dp + g2 * dp * s3)
    h0 = fn * (model.g1 + g2 * s3)
    h1 = fn * g2 * dp * (sig * s3 - wr * c3)

    ph0 = p00 * h0 + p01 * h1
    ph1 = p01 * h0 + p11 * h1
    r = ekf.r_meas
    s_inn = h0 * ph0 + h1 * ph1 + r
    if not (s_inn > 0.0) or not math.isfinite(s_inn):
        raise NumericalFailureError(f"innovation variance {s_inn!r} at t={t}")
    k0 = ph0 / s_inn
    k1 = ph1 / s_inn
    innov = z - h
    dp += k0 * innov
    tx += k1 * innov

    # Joseph form: (I-KH) P (I-KH)^T + K r K^T
    a00 = 1.0 - k0 * h0
    a01 = -k0 * h1
    a10 = -k1 * h0
    a11 = 1.0 - k1 * h1
    m00 = a00 * p00 + a01 * p01
    m01 = a00 * p01 + a01 * p11
    m10 = a10 * p00 + a11 * p01
    m11 = a10 * p01 + a11 * p11
    n00 = m00 * a00 + m01 * a01 + k0 * k0 * r
    n01 = m00 * a10 + m01 * a11 + k0 * k1 * r
    n10 = m10 * a00 + m11 * a01 + k1 * k0 * r
    n11 = m10 * a10 + m11 * a11 + k1 * k1 * r
    off = 0.5 * (n01 + n10)
    if not (math.isfinite(dp) and math.isfinite(tx)):
        raise NumericalFailureError(f"non-finite state at t={t}")
    return EkfState((dp, tx), (n00, off, n11), ekf.q_cov, r, ekf.k + 1)


def min_shed_requirement(delta_p: float, delta_p_s: float) -> float:
    if delta_p_s < 0:
        raise InvalidInputError("delta_p_s must be >= 0")
    return max(delta_p - delta_p_s, 0.0)


def criterion_local(
    shed_needed: bool, estimate_mw: float, delta_p_s_mw: float, accumulated_power_mw: float
) -> bool:
    return shed_needed and min_shed_requirement(estimate_mw, delta_p_s_mw) > accumulated_power_mw


# ---------------------------------------------------------------------------
# agent


@dataclass(frozen=True)
class DecisionEntry:
    t: float
    phase: str
    cause: str
    delta_p_est_pu: float = math.nan  # on the reporting base


@dataclass
class OutletAgent:
    config: AgentConfig
    outlet_id: Hashable = 0
    phase: Phase = Phase.IDLE
    condition_hits: int = 0
    shed_needed: bool = False
    event_time_estimate: float = math.nan
    detect_time: float = math.nan
    lse_result: float | None = None
    ekf: EkfState | None = None
    decision: str | None = None
    decision_time: float = math.nan
    off_command: bool = False
    decision_log: list[DecisionEntry] = field(default_factory=list)
    estimate_curve: list[tuple[float, float]] = field(default_factory=list)
    record_curve: bool = False

    def __post_init__(self) -> None:
        cfg = self.config
        self._bundle = cfg.bundle
        self._w = centred_slope_weights(cfg.rocof_window, cfg.sample_period)
        self._win: deque[float] = deque(maxlen=cfg.rocof_window)
        self._last_t = -math.inf
        self._last_f = math.nan
        self._drops = 0
        self._lse_t: list[float] = []
        self._lse_f: list[float] = []
        self._hold = 0
        self._refresh()

    # -- bundle handling --------------------------------------------------

    def _refresh(self) -> None:
        b = self._bundle
        if b is None:
            return
        self._model = self.config.model or b.model
        self._table = b.condition_table
        self._f_b = b.switch_off_freq_hz
        self._fn = b.derived.params.f_nominal
        self._report_scale = b.derived.params.s_base / self.config.report_base_mva

    @property
    def bundle(self) -> ParameterBundle | None:
        return self._bundle

    def receive_bundle(self, bundle: ParameterBundle) -> None:
        """Install a bundle. Re-receiving an identical bundle is a no-op."""
        if bundle == self._bundle:
            return
        self._bundle = bundle
        self._refresh()

    # -- helpers ------------------------------------------------------------

    def _log(self, t: float, cause: str, dp: float = math.nan) -> None:
        val = dp * self._report_scale if math.isfinite(dp) else math.nan
        self.decision_log.append(DecisionEntry(t, self.phase.value, cause, val))

    @property
    def estimate_mw(self) -> float:
        if self.ekf is not None:
            return self.ekf.delta_p * self._bundle.derived.params.s_base
        if self.lse_result is not None:
            return self.lse_result * self._bundle.derived.params.s_base
        return math.nan

    @property
    def decided(self) -> bool:
        return self.decision is not None

    def _switch_off(self, t: float, cause: str) -> str:
        self.phase = Phase.OFF
        self.decision = SWITCH_OFF
        self.decision_time = t
        est = self.ekf.delta_p if self.ekf is not None else math.nan
        self._log(t, cause, est)
        return SWITCH_OFF

    # -- commands -----------------------------------------------------------

    def command(self, t: float, cmd: str) -> str | None:
        """Obey a direct command from the control center."""
        if cmd == "off":
            self.off_command = True
            if self.phase is not Phase.OFF:
                return self._switch_off(t, CAUSE_COMMAND_OFF)
            return None
        if cmd == "on":
            self.off_command = False
            if self.phase is Phase.OFF:
                self.phase = Phase.SHED_DECIDED
                self.decision = STAY_ON
                self._log(t, CAUSE_COMMAND_ON)
            return None
        raise InvalidInputError(f"unknown command {cmd!r}")

    # -- main entry ---------------------------------------------------------

    def ingest(self, sample: FrequencySample | tuple[float, float]) -> str | None:
        if self._bundle is None:
            raise NoBundleError()
        if isinstance(sample, FrequencySample):
            t, f = sample.t, sample.f
        else:
            t, f = sample
        if not t > self._last_t:
            raise OutOfOrderSampleError(f"sample at t={t} not after t={self._last_t}")
        prev = self._last_f
        self._last_t = t
        self._last_f = f
        if self.phase is Phase.OFF:
            return None

        self._drops = self._drops + 1 if f < prev else 0
        win = self._win
        win.append(f)
        cfg = self.config

        if cfg.backup_enabled and f < self._f_b:
            return self._switch_off(t, CAUSE_BACKUP)

        phase = self.phase
        if phase is Phase.IDLE:
            if self._drops >= cfg.detect_consecutive:
                # checks run on the samples after detection, alongside LSE/EKF
                self._start_episode(t)
            return None

        if phase is Phase.EVENT_DETECTED:
            self._check(win)
            self._lse_t.append(t)
            self._lse_f.append(f)
            if len(self._lse_t) == cfg.lse_window:
                self.lse_result = lse_estimate((self._lse_t, self._lse_f), self._model.k_lse, self._fn)
                self.ekf = ekf_init(self.lse_result, self.detect_time, cfg)
                self.phase = Phase.ESTIMATING
                self._log(t, CAUSE_LSE, self.lse_result)
                if self.record_curve:
                    self.estimate_curve.append((t, self.lse_result * self._report_scale))
            return None

        if phase is Phase.ESTIMATING:
            self._check(win)
            self.ekf = ekf_step(self.ekf, (t, f), self._model)
            if self.record_curve:
                self.estimate_curve.append((t, self.ekf.delta_p * self._report_scale))
            if self.ekf.k >= cfg.ekf_iterations:
                return self._decide(t)
            return None

        if phase is Phase.SHED_DECIDED:
            if f >= self._fn - cfg.recover_band_hz:
                self._hold += 1
                if self._hold >= cfg.recover_hold:
                    self.phase = Phase.IDLE
                    self._log(t, CAUSE_RECOVERED)
                    self._hold = 0
            else:
                self._hold = 0
        return None

    def _start_episode(self, t: float) -> None:
        cfg = self.config
        self.phase = Phase.EVENT_DETECTED
        self.detect_time = t
        self.event_time_estimate = t - cfg.detect_consecutive * cfg.sample_period
        self.condition_hits = 0
        self.shed_needed = False
        self.lse_result = None
        self.ekf = None
        self.decision = None
        self._lse_t = []
        self._lse_f = []
        self._log(t, CAUSE_DETECTED)

    def _check(self, win: deque) -> None:
        if len(win) < self.config.rocof_window:
            return
        fc = sum(win) / len(win)
        g = sum(a * b for a, b in zip(self._w, win))
        if self._table.satisfied(fc, g):
            self.condition_hits += 1
            if self.condition_hits >= self.config.n_required:
                self.shed_needed = True

    def _decide(self, t: float) -> str:
        action, cause = decide_switch(self)
        if action == SWITCH_OFF:
            return self._switch_off(t, cause)
        self.phase = Phase.SHED_DECIDED
        self.decision = STAY_ON
        self.decision_time = t
        self._hold = 0
        self._log(t, CAUSE_STAY_ON, self.ekf.delta_p)
        return STAY_ON

    def feed(self, t: Sequence[float], f: Sequence[float], stop_on_decision: bool = False) -> str | None:
        """Ingest many samples; optionally stop at the first decision."""
        action = None
        for ti, fi in zip(t, f):
            a = self.ingest((ti, fi))
            if a is not None:
                action = a
                if stop_on_decision:
                    break
            elif stop_on_decision and self.decision is not None:
                break
        return action


def decide_switch(agent: OutletAgent) -> tuple[str, str]:
    """Evaluate the three switch-off criteria against the agent's current state."""
    b = agent.bundle
    if b is None:
        raise NoBundleError()
    if agent.off_command:
        return SWITCH_OFF, CAUSE_COMMAND_OFF
    if agent.ekf is not None and agent.ekf.k >= agent.config.ekf_iterations:
        est_mw = agent.ekf.delta_p * b.derived.params.s_base
        if criterion_local(agent.shed_needed, est_mw, b.delta_p_s_mw, b.accumulated_power_mw):
            return SWITCH_OFF, CAUSE_LOCAL
    f = agent._last_f
    if agent.config.backup_enabled and math.isfinite(f) and f < b.switch_off_freq_hz:
        return SWITCH_OFF, CAUSE_BACKUP
    return STAY_ON, CAUSE_STAY_ON


def write_decision_log(path, agents: Iterable[OutletAgent], header_lines: Iterable[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_LOG_HEADER)
        for a in agents:
            for e in a.decision_log:
                dp = "" if math.isnan(e.delta_p_est_pu) else repr(e.delta_p_est_pu)
                w.writerow([repr(float(e.t)), a.outlet_id, e.phase, e.cause, dp])


__all__ = [
    "AgentConfig",
    "DecisionEntry",
    "EkfState",
    "NoBundleError",
    "NumericalFailureError",
    "OutOfOrderSampleError",
    "OutletAgent",
    "Phase",
    "SWITCH_OFF",
    "STAY_ON",
    "check_condition",
    "criterion_local",
    "decide_switch",
    "detect_event",
    "ekf_init",
    "ekf_step",
    "lse_estimate",
    "measurement",
    "min_shed_requirement",
    "ols_slope",
    "window_rocof",
    "write_decision_log",
]

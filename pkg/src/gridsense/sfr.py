"""Aggregate system frequency response (SFR) model.

Closed-form response of a single-machine equivalent with a reheat governor
to step power imbalances, its derived modal constants, and a fixed-step
RK4 integrator of the underlying ODE used as an independent oracle.

All dynamics are in per-unit on ``(s_base, f_nominal)``. Hz and MW appear
only at the API edges (``*_hz`` / ``*_mw`` helpers).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

SAMPLE_PERIOD = 0.016  # s, outlet measurement cadence
TRAJECTORY_HEADER = ("t_s", "f_hz", "rocof_hz_per_s")


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


class UnsupportedRegimeError(ValueError):
    """Raised for overdamped systems where the oscillatory closed form does not apply."""


@dataclass(frozen=True)
class GeneratorUnit:
    rating_mva: float
    inertia_h: float
    droop_r: float

    def __post_init__(self) -> None:
        if not self.rating_mva > 0:
            raise InvalidInputError(f"rating_mva must be > 0, got {self.rating_mva}")
        if not self.inertia_h > 0:
            raise InvalidInputError(f"inertia_h must be > 0, got {self.inertia_h}")
        if not self.droop_r > 0:
            raise InvalidInputError(f"droop_r must be > 0, got {self.droop_r}")


@dataclass(frozen=True)
class SystemParams:
    """Physical constants of the equivalent SFR model.

    h, tr in seconds; d, r, km, fh dimensionless (p.u.); s_base in MVA;
    f_nominal in Hz; p_load_total in MW.
    """

    h: float
    d: float
    r: float
    km: float
    fh: float
    tr: float
    s_base: float
    f_nominal: float = 50.0
    p_load_total: float = 1.0

    def __post_init__(self) -> None:
        for name in ("h", "r", "tr", "s_base", "f_nominal", "p_load_total"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidInputError(f"{name} must be finite and > 0, got {v}")
        if not (math.isfinite(self.d) and self.d >= 0):
            raise InvalidInputError(f"d must be >= 0, got {self.d}")
        if not (0.0 <= self.fh <= 1.0):
            raise InvalidInputError(f"fh must lie in [0, 1], got {self.fh}")
        if not (math.isfinite(self.km) and self.km > 0):
            raise InvalidInputError(f"km must be > 0, got {self.km}")

    def mw_to_pu(self, mw: float) -> float:
        return mw / self.s_base

    def pu_to_mw(self, pu: float) -> float:
        return pu * self.s_base


@dataclass(frozen=True)
class DerivedParams:
    params: SystemParams
    omega_n: float
    zeta: float
    omega_r: float
    alpha: float
    phi: float
    phi1: float
    k_lse: float  # p.u. power per p.u./s of ROCOF
    g1: float

    @property
    def sigma(self) -> float:
        """Envelope decay rate zeta*omega_n (1/s)."""
        return self.zeta * self.omega_n

    @property
    def k_lse_per_hz(self) -> float:
        """LSE gain in p.u. power per Hz/s."""
        return self.k_lse / self.params.f_nominal


@dataclass(frozen=True)
class PowerEvent:
    time: float
    delta_p: float  # p.u. on s_base, positive = loss


@dataclass(frozen=True)
class FrequencySample:
    t: float
    f: float
    rocof: float = math.nan


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled frequency curve. ``rocof_hz`` may be None when not computed."""

    t: np.ndarray
    f_hz: np.ndarray
    rocof_hz: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[FrequencySample]:
        r = self.rocof_hz
        for i in range(len(self.t)):
            yield FrequencySample(
                float(self.t[i]), float(self.f_hz[i]), math.nan if r is None else float(r[i])
            )

    def samples(self) -> list[FrequencySample]:
        return list(self)

    def nadir(self) -> tuple[float, float]:
        """(time, frequency) of the sampled minimum."""
        i = int(np.argmin(self.f_hz))
        return float(self.t[i]), float(self.f_hz[i])


# ---------------------------------------------------------------------------
# aggregation


def aggregate_inertia(units: Sequence[GeneratorUnit], s_base: float) -> float:
    if not units:
        raise InvalidInputError("empty unit list")
    if not s_base > 0:
        raise InvalidInputError(f"s_base must be > 0, got {s_base}")
    return sum(u.inertia_h * u.rating_mva for u in units) / s_base


def aggregate_droop(units: Sequence[GeneratorUnit], s_base: float) -> float:
    """Rating-weighted parallel combination: 1/r = sum((S_i/s_base) / R_i)."""
    if not units:
        raise InvalidInputError("empty unit list")
    if not s_base > 0:
        raise InvalidInputError(f"s_base must be > 0, got {s_base}")
    inv = 0.0
    for u in units:
        if u.droop_r == 0:
            raise InvalidInputError("unit with zero droop")
        inv += (u.rating_mva / s_base) / u.droop_r
    return 1.0 / inv


# ---------------------------------------------------------------------------
# closed form


def derive(params: SystemParams) -> DerivedParams:
    h, d, r, km, fh, tr = params.h, params.d, params.r, params.km, params.fh, params.tr
    drk = d * r + km
    wn = math.sqrt(drk / (2.0 * h * r * tr))
    zeta = (2.0 * h * r + (d * r + km * fh) * tr) / (2.0 * drk) * wn
    if zeta >= 1.0:
        raise UnsupportedRegimeError(f"overdamped system (zeta={zeta:.6g} >= 1)")
    root = math.sqrt(1.0 - zeta * zeta)
    wr = wn * root
    alpha = math.sqrt((1.0 - 2.0 * tr * zeta * wn + tr * tr * wn * wn) / (1.0 - zeta * zeta))
    # quadrant-correct phases; phi1 lies in (0, pi)
    phi1 = math.atan2(tr * wr, 1.0 - zeta * wn * tr)
    phi2 = math.atan2(root, -zeta)
    phi = phi1 - phi2
    k_lse = -drk / (alpha * wn * r * math.sin(phi1))
    g1 = -r / drk
    return DerivedParams(
        params=params,
        omega_n=wn,
        zeta=zeta,
        omega_r=wr,
        alpha=alpha,
        phi=phi,
        phi1=phi1,
        k_lse=k_lse,
        g1=g1,
    )


def _shape(dp: DerivedParams, t):
    """Normalized step response 1 + alpha e^{-sigma t} sin(wr t + Phi)."""
    return 1.0 + dp.alpha * np.exp(-dp.sigma * t) * np.sin(dp.omega_r * t + dp.phi)


def delta_f(derived: DerivedParams, delta_p: float, t):
    """Frequency deviation in p.u. for a step loss ``delta_p`` applied at t=0.

    Accepts scalar or array ``t``; values at t < 0 are 0.
    """
    ta = np.asarray(t, dtype=float)
    out = np.where(ta >= 0.0, derived.g1 * delta_p * _shape(derived, np.maximum(ta, 0.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def delta_f_multi(derived: DerivedParams, events: Sequence[PowerEvent], t):
    """Superposition of step responses, each gated to t >= event time."""
    _check_sorted(events)
    ta = np.asarray(t, dtype=float)
    acc = np.zeros_like(ta)
    for ev in events:
        acc = acc + np.asarray(delta_f(derived, ev.delta_p, ta - ev.time))
    return float(acc) if acc.ndim == 0 else acc


def rocof(derived: DerivedParams, delta_p: float, t):
    """Analytic d(delta_f)/dt in p.u./s."""
    ta = np.asarray(t, dtype=float)
    tt = np.maximum(ta, 0.0)
    g = (
        derived.g1
        * delta_p
        * derived.alpha
        * derived.omega_n
        * np.exp(-derived.sigma * tt)
        * np.sin(derived.omega_r * tt + derived.phi1)
    )
    out = np.where(ta >= 0.0, g, 0.0)
    return float(out) if out.ndim == 0 else out


def rocof_hz(derived: DerivedParams, delta_p: float, t):
    return rocof(derived, delta_p, t) * derived.params.f_nominal


def rocof_multi(derived: DerivedParams, events: Sequence[PowerEvent], t):
    ta = np.asarray(t, dtype=float)
    acc = np.zeros_like(ta)
    for ev in events:
        acc = acc + np.asarray(rocof(derived, ev.delta_p, ta - ev.time))
    return float(acc) if acc.ndim == 0 else acc


def t_nadir(derived: DerivedParams) -> float:
    return (math.pi - derived.phi1) / derived.omega_r


def t_nadir_arctan(derived: DerivedParams) -> float:
    """Nadir time via the principal-value arctangent form.

    Agrees with :func:`t_nadir` when zeta*omega_n*T_R > 1. Below that the
    principal branch lands in (-pi/2, 0) and the two differ by pi/omega_r.
    """
    tr, wr = derived.params.tr, derived.omega_r
    return math.atan(tr * wr / (derived.sigma * tr - 1.0)) / wr


def f_nadir(derived: DerivedParams, delta_p: float) -> float:
    """Nadir frequency in Hz for a step loss of ``delta_p`` p.u."""
    tn = t_nadir(derived)
    return derived.params.f_nominal * (1.0 + derived.g1 * delta_p * float(_shape(derived, tn)))


def threshold_power_loss(derived: DerivedParams, f_s: float) -> float:
    """Loss (p.u.) whose nadir lands exactly on ``f_s``. ``f_s == f_nominal`` gives 0."""
    fn = derived.params.f_nominal
    if f_s > fn:
        raise InvalidInputError(f"f_s ({f_s}) must not exceed f_nominal ({fn})")
    tn = t_nadir(derived)
    return (fn - f_s) / fn / (-derived.g1 * float(_shape(derived, tn)))


def threshold_power_loss_mw(derived: DerivedParams, f_s: float) -> float:
    return threshold_power_loss(derived, f_s) * derived.params.s_base


# ---------------------------------------------------------------------------
# ODE oracle


def _state_matrices(params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
    """x = [df, xg]; 2H df' = -(km/R)(fh df + (1-fh) xg) - D df - dP; TR xg' = df - xg."""
    h, d, r, km, fh, tr = params.h, params.d, params.r, params.km, params.fh, params.tr
    a = np.array(
        [
            [(-km * fh / r - d) / (2.0 * h), -km * (1.0 - fh) / r / (2.0 * h)],
            [1.0 / tr, -1.0 / tr],
        ]
    )
    b = np.array([-1.0 / (2.0 * h), 0.0])
    return a, b


def _rk4_step(a: np.ndarray, b: np.ndarray, x: np.ndarray, u: float, dt: float) -> np.ndarray:
    def fx(y):
        return a @ y + b * u

    k1 = fx(x)
    k2 = fx(x + 0.5 * dt * k1)
    k3 = fx(x + 0.5 * dt * k2)
    k4 = fx(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def ode_oracle(
    params: SystemParams,
    events: Sequence[PowerEvent],
    t_end: float,
    dt: float = 1e-3,
) -> Trajectory:
    """Fixed-step RK4 integration of the swing equation with a reheat governor.

    Works in any damping regime. Steps are split at event instants so each
    step change in load is applied exactly. For the linear time-invariant
    system the RK4 step reduces to a constant propagator pair, which is what
    is iterated here.
    """
    if dt > 1e-3 + 1e-15:
        raise InvalidInputError("dt must be <= 1 ms")
    if t_end <= 0:
        raise InvalidInputError("t_end must be > 0")
    _check_sorted(events)
    a, b = _state_matrices(params)
    n = int(round(t_end / dt))
    times = np.arange(n + 1) * dt

    # RK4 on x' = A x + b u with u held constant equals x+ = M x + N u.
    eye = np.eye(2)
    ha = dt * a
    m_full = eye + ha + ha @ ha / 2.0 + ha @ ha @ ha / 6.0 + ha @ ha @ ha @ ha / 24.0
    n_full = dt * (eye + ha / 2.0 + ha @ ha / 6.0 + ha @ ha @ ha / 24.0) @ b

    x = np.zeros(2)
    u = 0.0
    ev_iter = iter(sorted(events, key=lambda e: e.time))
    pending = next(ev_iter, None)
    while pending is not None and pending.time <= 0.0:
        u += pending.delta_p
        pending = next(ev_iter, None)

    df = np.empty(n + 1)
    dfdt = np.empty(n + 1)
    df[0] = x[0]
    dfdt[0] = (a @ x + b * u)[0]
    m00, m01, m10, m11 = m_full[0, 0], m_full[0, 1], m_full[1, 0], m_full[1, 1]
    n0, n1 = n_full[0], n_full[1]
    x0, x1 = 0.0, 0.0
    for k in range(n):
        t0 = times[k]
        t1 = times[k + 1]
        if pending is not None and pending.time < t1:
            # split the step at each event instant inside (t0, t1)
            xs = np.array([x0, x1])
            tc = t0
            while pending is not None and pending.time < t1:
                h_sub = pending.time - tc
                if h_sub > 0:
                    xs = _rk4_step(a, b, xs, u, h_sub)
                tc = pending.time
                u += pending.delta_p
                pending = next(ev_iter, None)
            if t1 - tc > 0:
                xs = _rk4_step(a, b, xs, u, t1 - tc)
            x0, x1 = float(xs[0]), float(xs[1])
        else:
            x0, x1 = m00 * x0 + m01 * x1 + n0 * u, m10 * x0 + m11 * x1 + n1 * u
        df[k + 1] = x0
        dfdt[k + 1] = a[0, 0] * x0 + a[0, 1] * x1 + b[0] * u
    fn = params.f_nominal
    return Trajectory(times, fn * (1.0 + df), dfdt * fn, meta={"delta_f_pu": df})


# ---------------------------------------------------------------------------
# noisy sampling


@dataclass(frozen=True)
class NoiseModel:
    """Additive measurement noise in Hz.

    ``uniform``: each sample offset drawn from U(-magnitude, +magnitude).
    ``gaussian``: N(0, magnitude^2).
    """

    kind: str = "uniform"
    magnitude: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "gaussian"):
            raise InvalidInputError(f"unknown noise kind {self.kind!r}")
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise InvalidInputError(f"noise magnitude must be >= 0, got {self.magnitude}")

    @property
    def std(self) -> float:
        if self.kind == "uniform":
            return self.magnitude / math.sqrt(3.0)
        return self.magnitude

    @property
    def variance(self) -> float:
        return self.std**2

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.magnitude == 0.0:
            return np.zeros(n)
        if self.kind == "uniform":
            return rng.uniform(-self.magnitude, self.magnitude, n)
        return rng.normal(0.0, self.magnitude, n)


def sample_times(duration: float, t0: float = 0.0, dt: float = SAMPLE_PERIOD) -> np.ndarray:
    if not duration > 0:
        raise InvalidInputError("duration must be > 0")
    n = int(math.floor(duration / dt + 1e-9)) + 1
    return t0 + np.arange(n) * dt


def sample_trajectory(
    derived: DerivedParams,
    events: Sequence[PowerEvent],
    duration: float,
    noise: NoiseModel | None = None,
    seed: int | Sequence[int] | None = 0,
    *,
    t0: float = 0.0,
    with_rocof: bool = False,
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Measured frequency at the 16 ms cadence, starting at ``t0``."""
    t = sample_times(duration, t0)
    fn = derived.params.f_nominal
    f = fn * (1.0 + np.asarray(delta_f_multi(derived, events, t)))
    if noise is not None and noise.magnitude > 0:
        gen = rng if rng is not None else np.random.default_rng(seed)
        f = f + noise.draw(gen, len(t))
    r = np.asarray(rocof_multi(derived, events, t)) * fn if with_rocof else None
    return Trajectory(t, f, r)


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_trajectory_csv(path, traj: Trajectory, header_lines: Iterable[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        r = traj.rocof_hz
        for i in range(len(traj.t)):
            w.writerow([_fmt(traj.t[i]), _fmt(traj.f_hz[i]), "" if r is None else _fmt(r[i])])


class TrajectoryParseError(ValueError):
    pass


def read_trajectory_csv(path) -> Trajectory:
    """Parse a trajectory CSV; ``#`` lines are comments. Errors carry the line number."""
    ts: list[float] = []
    fs: list[float] = []
    rs: list[float] = []
    seen_header = False
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if not seen_header:
                if tuple(cells) != TRAJECTORY_HEADER:
                    raise TrajectoryParseError(
                        f"line {lineno}: expected header {','.join(TRAJECTORY_HEADER)}"
                    )
                seen_header = True
                continue
            if len(cells) not in (2, 3):
                raise TrajectoryParseError(f"line {lineno}: expected 3 fields, got {len(cells)}")
            try:
                t = float(cells[0])
                f = float(cells[1])
                r = float(cells[2]) if len(cells) == 3 and cells[2] else math.nan
            except ValueError as exc:
                raise TrajectoryParseError(f"line {lineno}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(f)):
                raise TrajectoryParseError(f"line {lineno}: non-finite value")
            if ts and t <= ts[-1]:
                raise TrajectoryParseError(f"line {lineno}: time not strictly increasing")
            ts.append(t)
            fs.append(f)
            rs.append(r)
    if not seen_header:
        raise TrajectoryParseError("line 1: missing header")
    ra = np.array(rs)
    return Trajectory(np.array(ts), np.array(fs), None if np.all(np.isnan(ra)) else ra)


def _check_sorted(events: Sequence[PowerEvent]) -> None:
    for a, b in zip(events, events[1:]):
        if b.time < a.time:
            raise InvalidInputError("events must be time-sorted")

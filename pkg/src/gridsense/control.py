"""Cloud-side logic: registry, load blocks, pre-event parameters, backup commands."""

from __future__ import annotations

import bisect
import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Callable, Hashable, Iterable, Mapping, Sequence

from scipy.optimize import brentq

from .sfr import (
    DerivedParams,
    InvalidInputError,
    delta_f,
    rocof_hz,
    t_nadir,
    threshold_power_loss,
)

UFLS_FLOOR_HZ = 49.0
DEFAULT_STALE_HORIZON_S = 180.0  # three missed 1-minute reports
DEFAULT_REFRESH_PERIOD_S = 900.0


class UflsFloorWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class Telemetry:
    t: float
    power_w: float
    switch_on: bool = True
    block_id: Hashable | None = None


@dataclass(frozen=True)
class OutletRecord:
    outlet_id: Hashable
    block_id: Hashable
    power_w: float
    last_report: float
    switch_on: bool = True

    def __post_init__(self) -> None:
        if not self.power_w >= 0:
            raise InvalidInputError(f"power_w must be >= 0, got {self.power_w}")


class Registry:
    """In-memory outlet registry owned by a single writer.

    ``weight`` scales each record's wattage when summing block power; a
    simulated outlet then stands for ``weight`` identical appliances.
    """

    def __init__(self, stale_horizon_s: float = DEFAULT_STALE_HORIZON_S, weight: float = 1.0):
        self.stale_horizon_s = stale_horizon_s
        self.weight = weight
        self.records: dict[Hashable, OutletRecord] = {}

    def __len__(self) -> int:
        return len(self.records)

    def is_stale(self, rec: OutletRecord, now: float) -> bool:
        return now - rec.last_report > self.stale_horizon_s

    def active(self, now: float) -> list[OutletRecord]:
        return [r for r in self.records.values() if not self.is_stale(r, now)]

    def stale(self, now: float) -> list[OutletRecord]:
        return [r for r in self.records.values() if self.is_stale(r, now)]

    def block_powers_mw(self, now: float) -> dict[Hashable, float]:
        sums: dict[Hashable, float] = {}
        for r in self.records.values():
            sums.setdefault(r.block_id, 0.0)
            if not self.is_stale(r, now):
                sums[r.block_id] += r.power_w
        return {b: w * self.weight / 1e6 for b, w in sums.items()}

    def snapshot(self) -> dict[Hashable, OutletRecord]:
        return dict(self.records)


def ingest_measurement(registry: Registry, outlet_id: Hashable, telemetry: Telemetry) -> Registry:
    prev = registry.records.get(outlet_id)
    if prev is None:
        if telemetry.block_id is None:
            raise InvalidInputError(f"first report for {outlet_id!r} must name its block")
        block = telemetry.block_id
    else:
        block = telemetry.block_id if telemetry.block_id is not None else prev.block_id
        if telemetry.t < prev.last_report:
            # late packet; keep the newer record
            return registry
    registry.records[outlet_id] = OutletRecord(
        outlet_id, block, float(telemetry.power_w), float(telemetry.t), bool(telemetry.switch_on)
    )
    return registry


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class LoadBlock:
    block_id: Hashable
    importance_rank: int
    block_power_mw: float
    accumulated_power_mw: float
    switch_off_freq_hz: float = math.nan


RankingPolicy = Callable[[Hashable], object]


def rank_by_labels(labels: Mapping[Hashable, int]) -> RankingPolicy:
    """Ranking policy from explicit labels (1 = least important)."""

    def key(block_id: Hashable) -> object:
        try:
            return labels[block_id]
        except KeyError:
            raise InvalidInputError(f"block {block_id!r} has no rank label") from None

    return key


def blocks_from_powers(
    powers_mw: Mapping[Hashable, float], ranking_policy: RankingPolicy | None = None
) -> list[LoadBlock]:
    key = ranking_policy or (lambda b: b)
    order = sorted(powers_mw, key=key)
    blocks = []
    acc = 0.0
    for rank, b in enumerate(order, start=1):
        acc += powers_mw[b]
        blocks.append(LoadBlock(b, rank, powers_mw[b], acc))
    return blocks


def build_blocks(
    registry: Registry, ranking_policy: RankingPolicy | None = None, now: float | None = None
) -> list[LoadBlock]:
    """Blocks in ascending importance with prefix-sum accumulated power.

    ``now`` defaults to the latest report time in the registry.
    """
    if now is None:
        now = max((r.last_report for r in registry.records.values()), default=0.0)
    return blocks_from_powers(registry.block_powers_mw(now), ranking_policy)


def switch_off_frequency(
    blocks: Sequence[LoadBlock], f_s: float, f_n: float, p_load_total: float, d: float
) -> list[float]:
    """Backup switch-off frequency per block, in rank order.

    f_i = f_s - P_i / (D * (P_L - sum_{j<i} P_j)) * f_n, with powers in any
    common unit since only their ratio enters.
    """
    out = []
    shed_before = 0.0
    for b in blocks:
        denom = d * (p_load_total - shed_before)
        if not denom > 0:
            raise InvalidInputError(f"nonpositive denominator at block {b.block_id!r}")
        f_b = min(f_s - b.block_power_mw / denom * f_n, f_s)
        out.append(f_b)
        shed_before += b.block_power_mw
    low = [f for f in out if f < UFLS_FLOOR_HZ]
    if low:
        warnings.warn(
            f"{len(low)} switch-off frequencies below the {UFLS_FLOOR_HZ} Hz UFLS floor "
            f"(min {min(low):.4f} Hz)",
            UflsFloorWarning,
            stacklevel=2,
        )
    return out


def assign_switch_off(
    blocks: Sequence[LoadBlock], f_s: float, f_n: float, p_load_total: float, d: float
) -> list[LoadBlock]:
    freqs = switch_off_frequency(blocks, f_s, f_n, p_load_total, d)
    return [replace(b, switch_off_freq_hz=f) for b, f in zip(blocks, freqs)]


# ---------------------------------------------------------------------------
# condition table


@dataclass(frozen=True)
class ConditionRow:
    f_low: float
    f_high: float
    rocof_threshold: float  # Hz/s


@dataclass(frozen=True)
class ShedConditionTable:
    """Rows ordered from the top band [f_n - w, f_n) downward."""

    rows: tuple[ConditionRow, ...]
    n_required: int = 15

    def __post_init__(self) -> None:
        if not self.rows:
            raise InvalidInputError("condition table needs at least one row")
        if self.n_required < 1:
            raise InvalidInputError("n_required must be >= 1")
        for a, b in zip(self.rows, self.rows[1:]):
            if not math.isclose(a.f_low, b.f_high, rel_tol=0, abs_tol=1e-12):
                raise InvalidInputError("rows must tile the band without gaps")
        # bisect keys over ascending lower bounds
        object.__setattr__(self, "_lows", tuple(r.f_low for r in reversed(self.rows)))

    @property
    def f_top(self) -> float:
        return self.rows[0].f_high

    @property
    def f_bottom(self) -> float:
        return self.rows[-1].f_low

    def lookup(self, f: float) -> ConditionRow | None:
        if not (self.f_bottom <= f < self.f_top):
            return None
        i = bisect.bisect_right(self._lows, f) - 1  # type: ignore[attr-defined]
        return self.rows[len(self.rows) - 1 - i]

    def satisfied(self, f: float, rocof: float) -> bool:
        row = self.lookup(f)
        return row is not None and rocof < row.rocof_threshold

    def thresholds(self) -> list[float]:
        return [r.rocof_threshold for r in self.rows]


def build_condition_table(
    derived: DerivedParams,
    f_s: float,
    f_n: float | None = None,
    bin_width: float = 0.05,
    n_required: int = 15,
) -> ShedConditionTable:
    """ROCOF thresholds along the threshold-loss trajectory.

    Each row's threshold is the ROCOF of the trajectory whose nadir is
    exactly ``f_s``, taken where that trajectory crosses the row's lower
    bound. The bottom row therefore gets 0.
    """
    fn = derived.params.f_nominal if f_n is None else f_n
    if f_s >= fn:
        raise InvalidInputError(f"f_s ({f_s}) must be below f_n ({fn})")
    span = fn - f_s
    n_rows = round(span / bin_width)
    if n_rows < 1 or abs(n_rows * bin_width - span) > 1e-9:
        raise InvalidInputError(f"bin_width {bin_width} does not divide {span:.6g} Hz")
    dps = threshold_power_loss(derived, f_s)
    tn = t_nadir(derived)

    def f_at(t: float) -> float:
        return fn * (1.0 + delta_f(derived, dps, t))

    rows = []
    for i in range(n_rows):
        f_high = fn - i * bin_width
        f_low = fn - (i + 1) * bin_width
        if i == n_rows - 1:
            f_low = f_s
            thr = 0.0
        else:
            t_cross = brentq(lambda t: f_at(t) - f_low, 0.0, tn, xtol=1e-14, rtol=1e-15)
            thr = float(rocof_hz(derived, dps, t_cross))
        rows.append(ConditionRow(round(f_low, 12), round(f_high, 12), thr))
    return ShedConditionTable(tuple(rows), n_required)


# ---------------------------------------------------------------------------
# bundles


@dataclass(frozen=True)
class EstimatorModel:
    """Constants an outlet needs for LSE/EKF, as stored in a bundle.

    ``g2`` is the coefficient G1*alpha; the decay rate is zeta*omega_n.
    """

    f_nominal: float
    s_base: float
    g1: float
    g2: float
    zeta: float
    omega_n: float
    omega_r: float
    phi: float
    k_lse: float  # p.u. per p.u./s

    @classmethod
    def from_derived(cls, d: DerivedParams) -> EstimatorModel:
        return cls(
            f_nominal=d.params.f_nominal,
            s_base=d.params.s_base,
            g1=d.g1,
            g2=d.g1 * d.alpha,
            zeta=d.zeta,
            omega_n=d.omega_n,
            omega_r=d.omega_r,
            phi=d.phi,
            k_lse=d.k_lse,
        )

    @property
    def sigma(self) -> float:
        return self.zeta * self.omega_n

    def perturbed(self, factors: Sequence[float]) -> EstimatorModel:
        """Relative errors on (G1, G2, omega_n, omega_r, Phi)."""
        e1, e2, e3, e4, e5 = factors
        return replace(
            self,
            g1=self.g1 * (1.0 + e1),
            g2=self.g2 * (1.0 + e2),
            omega_n=self.omega_n * (1.0 + e3),
            omega_r=self.omega_r * (1.0 + e4),
            phi=self.phi * (1.0 + e5),
        )


@dataclass(frozen=True)
class ParameterBundle:
    derived: DerivedParams
    delta_p_s_mw: float
    f_s: float
    condition_table: ShedConditionTable
    block_id: Hashable
    accumulated_power_mw: float
    switch_off_freq_hz: float
    issued_at: float
    model: EstimatorModel
    refresh_period_s: float = DEFAULT_REFRESH_PERIOD_S

    def is_consistent(self, bin_width: float = 0.05) -> bool:
        table = build_condition_table(
            self.derived, self.f_s, bin_width=bin_width, n_required=self.condition_table.n_required
        )
        return table == self.condition_table

    def is_stale(self, params_changed_at: float) -> bool:
        return self.issued_at < params_changed_at

    def with_model(self, model: EstimatorModel) -> ParameterBundle:
        return replace(self, model=model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["derived"]["params"] = asdict(self.derived.params)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=str)


def make_bundle(
    derived: DerivedParams,
    blocks: Sequence[LoadBlock],
    f_s: float,
    table: ShedConditionTable,
    issued_at: float = 0.0,
    refresh_period_s: float = DEFAULT_REFRESH_PERIOD_S,
) -> dict[Hashable, ParameterBundle]:
    """One bundle per block, keyed by block id."""
    dps_mw = threshold_power_loss(derived, f_s) * derived.params.s_base
    model = EstimatorModel.from_derived(derived)
    out = {}
    for b in blocks:
        out[b.block_id] = ParameterBundle(
            derived=derived,
            delta_p_s_mw=dps_mw,
            f_s=f_s,
            condition_table=table,
            block_id=b.block_id,
            accumulated_power_mw=b.accumulated_power_mw,
            switch_off_freq_hz=b.switch_off_freq_hz,
            issued_at=issued_at,
            model=model,
            refresh_period_s=refresh_period_s,
        )
    return out


def bundle_from_dict(d: Mapping) -> ParameterBundle:
    """Inverse of :meth:`ParameterBundle.to_dict` (block ids come back as stored)."""
    from .sfr import SystemParams

    dd = dict(d["derived"])
    params = SystemParams(**dd.pop("params"))
    derived = DerivedParams(params=params, **dd)
    tab = d["condition_table"]
    table = ShedConditionTable(
        tuple(ConditionRow(**r) for r in tab["rows"]), int(tab["n_required"])
    )
    return ParameterBundle(
        derived=derived,
        delta_p_s_mw=float(d["delta_p_s_mw"]),
        f_s=float(d["f_s"]),
        condition_table=table,
        block_id=d["block_id"],
        accumulated_power_mw=float(d["accumulated_power_mw"]),
        switch_off_freq_hz=float(d["switch_off_freq_hz"]),
        issued_at=float(d["issued_at"]),
        model=EstimatorModel(**d["model"]),
        refresh_period_s=float(d.get("refresh_period_s", DEFAULT_REFRESH_PERIOD_S)),
    )


# ---------------------------------------------------------------------------
# backup commands


def expected_off(estimated_loss_mw: float, delta_p_s_mw: float, accumulated_power_mw: float) -> bool:
    return max(estimated_loss_mw - delta_p_s_mw, 0.0) > accumulated_power_mw


def direct_shed_commands(
    estimated_loss_mw: float,
    delta_p_s_mw: float,
    blocks: Sequence[LoadBlock],
    outlet_blocks: Mapping[Hashable, Hashable],
    observed_on: Mapping[Hashable, bool],
) -> list[tuple[Hashable, str]]:
    """Commands for outlets whose observed state differs from the accumulated-power rule.

    Outlets missing from ``observed_on`` are skipped (no telemetry, nothing to correct).
    """
    acc = {b.block_id: b.accumulated_power_mw for b in blocks}
    cmds = []
    for oid, bid in outlet_blocks.items():
        if oid not in observed_on:
            continue
        want_off = expected_off(estimated_loss_mw, delta_p_s_mw, acc[bid])
        is_on = observed_on[oid]
        if want_off and is_on:
            cmds.append((oid, "off"))
        elif not want_off and not is_on:
            cmds.append((oid, "on"))
    return cmds


COMMAND_LOG_HEADER = ("t_s", "outlet_id", "command")


def write_command_log(
    path, rows: Iterable[tuple[float, Hashable, str]], header_lines: Iterable[str] = ()
) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMMAND_LOG_HEADER)
        for t, oid, cmd in rows:
            w.writerow([repr(float(t)), oid, cmd])


def table_rows_for_csv(table: ShedConditionTable) -> list[list]:
    return [[r.f_low, r.f_high, r.rocof_threshold] for r in table.rows]


__all__ = [
    "ConditionRow",
    "EstimatorModel",
    "LoadBlock",
    "OutletRecord",
    "ParameterBundle",
    "Registry",
    "ShedConditionTable",
    "Telemetry",
    "UflsFloorWarning",
    "assign_switch_off",
    "blocks_from_powers",
    "build_blocks",
    "build_condition_table",
    "bundle_from_dict",
    "direct_shed_commands",
    "expected_off",
    "ingest_measurement",
    "make_bundle",
    "rank_by_labels",
    "switch_off_frequency",
    "write_command_log",
]

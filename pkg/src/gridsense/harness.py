"""Monte-Carlo and closed-loop experiments on a scenario.

Every trial draws from its own substream keyed by (seed, experiment tag,
case, trial index), so results do not depend on execution order.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from .agent import (
    CAUSE_LOCAL,
    CAUSE_LSE,
    CAUSE_STAY_ON,
    SWITCH_OFF,
    NoBundleError,
    AgentConfig,
    OutletAgent,
    Phase,
)
from .control import (
    EstimatorModel,
    LoadBlock,
    ParameterBundle,
    Registry,
    ShedConditionTable,
    Telemetry,
    assign_switch_off,
    build_blocks,
    build_condition_table,
    direct_shed_commands,
    ingest_measurement,
    make_bundle,
)
from .netsim import Bus, DeliverySpec, Message, MessageKind
from .scenario import Scenario
from .sfr import (
    SAMPLE_PERIOD,
    DerivedParams,
    NoiseModel,
    PowerEvent,
    Trajectory,
    delta_f,
    derive,
    f_nadir,
    rocof_multi,
    sample_times,
    threshold_power_loss,
)


TAG_CONDITION = 2
TAG_LSE_EKF = 4
TAG_PARAM = 5
TAG_FLEET = 6
TAG_GROUP = 7
TAG_CLOSED = 8
TAG_BUS = 10

TABLE3_EDGES = (2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)
TABLE4_EDGES = (4.4, 4.6, 4.8, 5.0, 5.2, 5.4)
TABLE5_EDGES = (4.0, 4.4, 4.6, 4.8, 5.0, 5.2, 5.4, 5.6, 6.0)
TABLE2_CASES = ((380.0, 0.0), (380.0, 0.005), (380.0, 0.01), (320.0, 0.0), (320.0, 0.005), (320.0, 0.01))


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


# ---------------------------------------------------------------------------
# shared setup


@dataclass(frozen=True)
class Setup:
    scenario: Scenario
    derived: DerivedParams
    table: ShedConditionTable
    delta_p_s_mw: float

    @classmethod
    def from_scenario(cls, sc: Scenario) -> Setup:
        d = derive(sc.system)
        table = build_condition_table(d, sc.f_s, bin_width=sc.bin_width, n_required=sc.agent.n_required)
        return cls(sc, d, table, threshold_power_loss(d, sc.f_s) * sc.system.s_base)

    @property
    def model(self) -> EstimatorModel:
        return EstimatorModel.from_derived(self.derived)

    def probe_bundle(self) -> ParameterBundle:
        """Bundle for estimation studies: never sheds by estimate, no backup threshold."""
        return ParameterBundle(
            derived=self.derived,
            delta_p_s_mw=self.delta_p_s_mw,
            f_s=self.scenario.f_s,
            condition_table=self.table,
            block_id="probe",
            accumulated_power_mw=math.inf,
            switch_off_freq_hz=-math.inf,
            issued_at=0.0,
            model=self.model,
        )

    def block_bundle(self, accumulated_power_mw: float, block_power_mw: float | None = None) -> ParameterBundle:
        """Bundle for a single block with the given accumulated power.

        The block is treated as the lowest-ranked one of its own size, so its
        backup frequency follows from ``block_power_mw`` (default: all of it).
        """
        sc = self.scenario
        p = accumulated_power_mw if block_power_mw is None else block_power_mw
        blk = LoadBlock("block", 1, p, accumulated_power_mw)
        (blk,) = assign_switch_off([blk], sc.f_s, sc.system.f_nominal, sc.system.p_load_total, sc.system.d)
        return make_bundle(self.derived, [blk], sc.f_s, self.table)["block"]

    def agent_config(
        self,
        bundle: ParameterBundle | None,
        noise: NoiseModel,
        model: EstimatorModel | None = None,
        backup_enabled: bool | None = None,
    ) -> AgentConfig:
        a = self.scenario.agent
        # a noiseless stream still needs a positive measurement variance
        r_meas = max(noise.variance, 1e-10)
        return AgentConfig(
            bundle=bundle,
            detect_consecutive=a.detect_consecutive,
            lse_window=a.lse_window,
            ekf_iterations=a.ekf_iterations,
            n_required=a.n_required,
            rocof_window=a.rocof_window,
            q_cov=(a.q_dp, a.q_tx),
            p0_dp_rel=a.p0_dp_rel,
            p0_tx=a.p0_tx,
            r_meas=r_meas,
            backup_enabled=self.scenario.run.backup_enabled if backup_enabled is None else backup_enabled,
            report_base_mva=self.scenario.run.report_base_mva,
            model=model,
        )

    def base_curve(self, loss_mw: float, duration: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        dur = self.scenario.run.duration_s if duration is None else duration
        t = sample_times(dur)
        fn = self.derived.params.f_nominal
        f = fn * (1.0 + np.asarray(delta_f(self.derived, loss_mw / self.derived.params.s_base, t)))
        return t, f

    def to_report(self, pu_sys: float) -> float:
        return pu_sys * self.derived.params.s_base / self.scenario.run.report_base_mva


def _param_factors(rng: np.random.Generator, level: float) -> np.ndarray:
    return rng.uniform(-level, level, 5)


def run_agent_trial(
    cfg: AgentConfig, t: Sequence[float], base_f: np.ndarray, noise: NoiseModel, rng: np.random.Generator
) -> OutletAgent:
    f = base_f + noise.draw(rng, len(base_f)) if noise.magnitude > 0 else base_f
    agent = OutletAgent(cfg)
    agent.feed(t, f.tolist(), stop_on_decision=True)
    return agent


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class McResult:
    successes: int
    trials: int

    @property
    def p(self) -> float:
        return self.successes / self.trials

    @property
    def stderr(self) -> float:
        p = self.p
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return max(0.0, self.p - z * self.stderr), min(1.0, self.p + z * self.stderr)


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    below: int
    above: int
    missing: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.below + self.above + self.missing

    def share(self, lo: float, hi: float) -> float:
        """Fraction of all trials in [lo, hi), which must align with bin edges."""
        i = self.edges.index(lo)
        j = self.edges.index(hi)
        return sum(self.counts[i:j]) / self.total

    def rows(self) -> list[tuple[str, int, float]]:
        n = self.total
        out = [(f"[{a:g}, {b:g})", c, c / n) for a, b, c in zip(self.edges, self.edges[1:], self.counts)]
        out.insert(0, (f"< {self.edges[0]:g}", self.below, self.below / n))
        out.append((f">= {self.edges[-1]:g}", self.above, self.above / n))
        out.append(("no estimate", self.missing, self.missing / n))
        return out


def histogram(values: Sequence[float], edges: Sequence[float]) -> Histogram:
    v = np.asarray(values, dtype=float)
    missing = int(np.isnan(v).sum())
    v = v[~np.isnan(v)]
    e = np.asarray(edges, dtype=float)
    below = int((v < e[0]).sum())
    above = int((v >= e[-1]).sum())
    idx = np.searchsorted(e, v[(v >= e[0]) & (v < e[-1])], side="right") - 1
    counts = np.bincount(idx, minlength=len(e) - 1)
    return Histogram(tuple(float(x) for x in edges), tuple(int(c) for c in counts), below, above, missing)


@dataclass(frozen=True)
class EstimateResult:
    """Per-trial estimates on the reporting base (NaN when no estimate formed)."""

    target: float
    lse: np.ndarray
    ekf: np.ndarray
    detect_time: np.ndarray
    decision_time: np.ndarray

    def within(self, which: str = "ekf", tol: float = 0.04) -> float:
        v = getattr(self, which)
        ok = np.abs(v - self.target) < tol * self.target
        return float(np.sum(ok)) / len(v)

    def hist(self, which: str, edges: Sequence[float]) -> Histogram:
        return histogram(getattr(self, which), edges)


# ---------------------------------------------------------------------------
# Monte-Carlo studies


def run_condition_mc(
    scenario: Scenario,
    loss_mw: float,
    noise: NoiseModel,
    trials: int | None = None,
    seed: int | None = None,
    case: int = 0,
) -> McResult:
    """Fraction of trials in which one agent concludes shedding is needed."""
    setup = Setup.from_scenario(scenario)
    n = scenario.run.trials if trials is None else trials
    sd = scenario.run.seed if seed is None else seed
    cfg = setup.agent_config(setup.probe_bundle(), noise, backup_enabled=False)
    t, base = setup.base_curve(loss_mw)
    tl = t.tolist()
    hits = 0
    for k in range(n):
        agent = run_agent_trial(cfg, tl, base, noise, substream(sd, TAG_CONDITION, case, k))
        hits += agent.shed_needed
    return McResult(hits, n)


def run_estimation_mc(
    scenario: Scenario,
    param_noise: float | None = None,
    trials: int | None = None,
    seed: int | None = None,
    loss_mw: float | None = None,
    noise: NoiseModel | None = None,
) -> EstimateResult:
    """LSE and EKF estimates from the same per-trial streams."""
    setup = Setup.from_scenario(scenario)
    n = scenario.run.trials if trials is None else trials
    sd = scenario.run.seed if seed is None else seed
    loss = scenario.event.loss_mw if loss_mw is None else loss_mw
    nz = scenario.noise.model() if noise is None else noise
    pn = scenario.noise.param_noise if param_noise is None else param_noise
    bundle = setup.probe_bundle()
    base_model = setup.model
    cfg = setup.agent_config(bundle, nz, backup_enabled=False)
    t, base = setup.base_curve(loss)
    tl = t.tolist()
    scale = setup.to_report(1.0)
    lse = np.full(n, np.nan)
    ekf = np.full(n, np.nan)
    det = np.full(n, np.nan)
    dec = np.full(n, np.nan)
    for k in range(n):
        c = cfg
        if pn > 0:
            factors = _param_factors(substream(sd, TAG_PARAM, k), pn)
            c = replace(cfg, model=base_model.perturbed(factors))
        agent = run_agent_trial(c, tl, base, nz, substream(sd, TAG_LSE_EKF, k))
        if agent.lse_result is not None:
            lse[k] = agent.lse_result * scale
        if agent.ekf is not None and agent.ekf.k >= c.ekf_iterations:
            ekf[k] = agent.ekf.delta_p * scale
            dec[k] = agent.decision_time
        det[k] = agent.detect_time
    return EstimateResult(loss / scenario.run.report_base_mva, lse, ekf, det, dec)


def run_lse_mc(scenario: Scenario, **kw) -> tuple[Histogram, EstimateResult]:
    res = run_estimation_mc(scenario, param_noise=0.0, **kw)
    return res.hist("lse", TABLE3_EDGES), res


def run_ekf_mc(scenario: Scenario, param_noise: float | None = None, **kw) -> tuple[Histogram, EstimateResult]:
    res = run_estimation_mc(scenario, param_noise=param_noise, **kw)
    pn = scenario.noise.param_noise if param_noise is None else param_noise
    return res.hist("ekf", TABLE5_EDGES if pn > 0 else TABLE4_EDGES), res


# ---------------------------------------------------------------------------
# fleet


@dataclass
class Fleet:
    watts: np.ndarray
    group: np.ndarray  # 0-based group index, also the rank order
    weight: float
    non_responder: np.ndarray

    @property
    def size(self) -> int:
        return len(self.watts)


def build_fleet(scenario: Scenario, outlets: int | None = None, seed: int | None = None) -> Fleet:
    fs = scenario.fleet
    n = fs.outlets if outlets is None else outlets
    if n % fs.groups:
        raise ValueError(f"{n} outlets do not split evenly into {fs.groups} groups")
    sd = scenario.run.seed if seed is None else seed
    rng = substream(sd, TAG_FLEET, n)
    watts = rng.uniform(fs.watts_min, fs.watts_max, n)
    nr = rng.random(n) < fs.non_responder_fraction if fs.non_responder_fraction > 0 else np.zeros(n, bool)
    group = np.arange(n) // (n // fs.groups)
    return Fleet(watts, group, fs.represented_outlets / n, nr)


def fleet_bundles(setup: Setup, fleet: Fleet, issued_at: float = 0.0):
    """Registry -> blocks -> bundles, the same path the control center takes."""
    reg = Registry(weight=fleet.weight)
    for i in range(fleet.size):
        ingest_measurement(reg, i, Telemetry(issued_at, float(fleet.watts[i]), True, int(fleet.group[i]) + 1))
    sc = setup.scenario
    blocks = build_blocks(reg, now=issued_at)
    blocks = assign_switch_off(blocks, sc.f_s, sc.system.f_nominal, sc.system.p_load_total, sc.system.d)
    bundles = make_bundle(setup.derived, blocks, sc.f_s, setup.table, issued_at=issued_at)
    return reg, blocks, bundles


@dataclass
class TrialReport:
    shed_mw: float
    outlets_off: int  # simulated outlets
    outlets_off_represented: float
    group_off_fraction: np.ndarray
    group_accumulated_mw: np.ndarray
    target_mw: float
    histograms: dict[str, Histogram] = field(default_factory=dict)
    nadir_hz: float = math.nan
    nadir_without_hz: float = math.nan
    latencies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extra: dict = field(default_factory=dict)

    def bands(self) -> tuple[int, int, int]:
        """(all-off, mixed, all-on) group counts."""
        g = self.group_off_fraction
        return int(np.sum(g == 1.0)), int(np.sum((g > 0) & (g < 1))), int(np.sum(g == 0.0))

    def band_pattern_ok(self) -> bool:
        """All-off groups first, then mixed, then all-on, by rank."""
        g = self.group_off_fraction
        cls = np.where(g == 1.0, 0, np.where(g == 0.0, 2, 1))
        return bool(np.all(np.diff(cls) >= 0))

    @property
    def median_latency(self) -> float:
        return float(np.median(self.latencies)) if len(self.latencies) else math.nan


def _group_stats(fleet: Fleet, off: np.ndarray, blocks) -> tuple[np.ndarray, np.ndarray]:
    groups = int(fleet.group.max()) + 1
    frac = np.bincount(fleet.group, weights=off.astype(float), minlength=groups) / np.bincount(
        fleet.group, minlength=groups
    )
    acc = np.array([b.accumulated_power_mw for b in blocks])
    return frac, acc


def run_group_experiment(
    scenario: Scenario,
    param_noise: float | None = None,
    outlets: int | None = None,
    seed: int | None = None,
) -> TrialReport:
    """Every outlet estimates the loss on its own stream and applies the shed rule."""
    setup = Setup.from_scenario(scenario)
    sd = scenario.run.seed if seed is None else seed
    pn = scenario.noise.param_noise if param_noise is None else param_noise
    fleet = build_fleet(scenario, outlets, sd)
    _, blocks, bundles = fleet_bundles(setup, fleet)
    nz = scenario.noise.model()
    t, base = setup.base_curve(scenario.event.loss_mw)
    tl = t.tolist()
    base_model = setup.model
    off = np.zeros(fleet.size, dtype=bool)
    ekf = np.full(fleet.size, np.nan)
    lat = []
    # open-loop curve ignores the fleet's own shedding, so the frequency
    # backup would fire on a trajectory that never happens; local rule only
    cfg_by_block = {bid: setup.agent_config(b, nz, backup_enabled=False) for bid, b in bundles.items()}
    for i in range(fleet.size):
        if fleet.non_responder[i]:
            continue
        cfg = cfg_by_block[int(fleet.group[i]) + 1]
        if pn > 0:
            factors = _param_factors(substream(sd, TAG_PARAM, 1, i), pn)
            cfg = replace(cfg, model=base_model.perturbed(factors))
        agent = run_agent_trial(cfg, tl, base, nz, substream(sd, TAG_GROUP, i))
        if agent.ekf is not None:
            ekf[i] = setup.to_report(agent.ekf.delta_p)
        if agent.decision == SWITCH_OFF:
            off[i] = True
        if not math.isnan(agent.decision_time):
            lat.append(agent.decision_time - scenario.event.time)
    shed = float(np.sum(fleet.watts[off])) * fleet.weight / 1e6
    frac, acc = _group_stats(fleet, off, blocks)
    target = max(scenario.event.loss_mw - setup.delta_p_s_mw, 0.0)
    edges = TABLE5_EDGES if pn > 0 else TABLE4_EDGES
    return TrialReport(
        shed_mw=shed,
        outlets_off=int(off.sum()),
        outlets_off_represented=float(off.sum()) * fleet.weight,
        group_off_fraction=frac,
        group_accumulated_mw=acc,
        target_mw=target,
        histograms={"ekf": histogram(ekf, edges)},
        latencies=np.asarray(lat),
        extra={"off": off, "fleet": fleet, "blocks": blocks},
    )


def correct_with_commands(
    setup: Setup, fleet: Fleet, blocks, off: np.ndarray, estimated_loss_mw: float
) -> tuple[list[tuple[int, str]], np.ndarray]:
    """Apply backup direct commands to an observed on/off vector."""
    outlet_blocks = {i: int(fleet.group[i]) + 1 for i in range(fleet.size)}
    observed = {i: not bool(off[i]) for i in range(fleet.size)}
    cmds = direct_shed_commands(estimated_loss_mw, setup.delta_p_s_mw, blocks, outlet_blocks, observed)
    new = off.copy()
    for oid, c in cmds:
        new[oid] = c == "off"
    return cmds, new


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopResult:
    with_gs: Trajectory
    without_gs: Trajectory
    report: TrialReport
    agents: list[OutletAgent]
    bus: Bus
    commands: list[tuple[float, int, str]]
    shed_events: list[PowerEvent]

    def criterion1_log(self) -> list[tuple[float, Hashable, str]]:
        out = []
        for a in self.agents:
            for e in a.decision_log:
                if e.cause == CAUSE_LOCAL:
                    out.append((e.t, a.outlet_id, e.cause))
        return out


def run_closed_loop(
    scenario: Scenario,
    outlets: int | None = None,
    seed: int | None = None,
    post_event_drop: float | None = None,
) -> ClosedLoopResult:
    """Fleet of agents in feedback with the frequency they shed against.

    Before the event the center collects telemetry and broadcasts bundles
    over the bus. After it, each outlet sees the superposed response of the
    loss and of every shed so far, plus its own noise. A backup command
    round follows after ``center_delay_s``.
    """
    sc = scenario
    run = sc.run
    setup = Setup.from_scenario(sc)
    sd = run.seed if seed is None else seed
    drop_after = run.post_event_drop if post_event_drop is None else post_event_drop
    n_out = run.closed_loop_outlets if outlets is None else outlets
    fleet = build_fleet(sc, n_out, sd)
    s_base = sc.system.s_base
    fn = sc.system.f_nominal
    t_ev = sc.event.time
    nz = sc.noise.model()

    bus = Bus(seed=int(substream(sd, TAG_BUS).integers(2**31)))
    bus.set_spec(MessageKind.TELEMETRY, DeliverySpec(tuple(run.telemetry_latency_s)))
    bus.set_spec(MessageKind.BUNDLE, DeliverySpec(tuple(run.bundle_latency_s)))
    bus.set_spec(MessageKind.COMMAND, DeliverySpec(tuple(run.command_latency_s)))

    # pre-event: telemetry up, bundles down
    t_tel = t_ev - 120.0
    t_bundle = t_ev - 60.0
    for i in range(fleet.size):
        bus.schedule(
            Message(
                MessageKind.TELEMETRY, i, "center",
                Telemetry(t_tel, float(fleet.watts[i]), True, int(fleet.group[i]) + 1), t_tel,
            )
        )
    reg = Registry(weight=fleet.weight)
    for d in bus.advance(t_bundle):
        ingest_measurement(reg, d.message.src, d.message.payload)
    blocks = build_blocks(reg, now=t_bundle)
    blocks = assign_switch_off(blocks, sc.f_s, fn, sc.system.p_load_total, sc.system.d)
    bundles = make_bundle(setup.derived, blocks, sc.f_s, setup.table, issued_at=t_bundle)
    for i in range(fleet.size):
        bus.schedule(Message(MessageKind.BUNDLE, "center", i, bundles[int(fleet.group[i]) + 1], t_bundle))

    agents = [OutletAgent(setup.agent_config(None, nz), outlet_id=i) for i in range(fleet.size)]
    for d in bus.advance(t_ev - run.pre_event_s - SAMPLE_PERIOD):
        agents[d.message.dst].receive_bundle(d.message.payload)

    # post-event links
    if drop_after > 0:
        for kind in MessageKind:
            old = bus.spec_for(kind)
            bus.set_spec(kind, DeliverySpec(old.latency, drop_after, old.fifo))

    loss_pu = sc.event.loss_mw / s_base
    events: list[PowerEvent] = [PowerEvent(t_ev, loss_pu)]
    shed_at: dict[float, float] = {}
    t_grid = t_ev - run.pre_event_s + np.arange(
        int(round((run.pre_event_s + run.closed_loop_duration_s) / SAMPLE_PERIOD)) + 1
    ) * SAMPLE_PERIOD
    f_with = np.empty(len(t_grid))
    dpw = setup.derived
    commands: list[tuple[float, int, str]] = []
    status_sent = False
    cmds_sent = False
    active = [a for i, a in enumerate(agents) if a.bundle is not None and not fleet.non_responder[i]]
    passive = [a for i, a in enumerate(agents) if a.bundle is not None and fleet.non_responder[i]]

    def off_vector() -> np.ndarray:
        return np.array([a.phase is Phase.OFF for a in agents])

    for k, tk in enumerate(t_grid):
        tk = float(tk)
        dev = 0.0
        for ev in events:
            if tk >= ev.time:
                dev += float(delta_f(dpw, ev.delta_p, tk - ev.time))
        f_true = fn * (1.0 + dev)
        f_with[k] = f_true
        noise = nz.draw(substream(sd, TAG_CLOSED, k), fleet.size)
        new_shed = 0.0
        for a in active:
            if a.phase is Phase.OFF:
                continue
            if a.ingest((tk, f_true + noise[a.outlet_id])) == SWITCH_OFF:
                new_shed += fleet.watts[a.outlet_id]
        for a in passive:
            if a.phase is Phase.OFF:
                continue
            # broken estimator: only the frequency backup and commands act
            if a.config.backup_enabled and f_true + noise[a.outlet_id] < a.bundle.switch_off_freq_hz:
                a.command(tk, "off")
                new_shed += fleet.watts[a.outlet_id]
        for d in bus.advance(tk):
            m = d.message
            if m.kind is MessageKind.COMMAND:
                a = agents[m.dst]
                was_off = a.phase is Phase.OFF
                a.command(d.time, m.payload)
                if a.phase is Phase.OFF and not was_off:
                    new_shed += fleet.watts[m.dst]
                elif was_off and a.phase is not Phase.OFF:
                    new_shed -= fleet.watts[m.dst]
            elif m.kind is MessageKind.TELEMETRY:
                ingest_measurement(reg, m.src, m.payload)
        if new_shed != 0.0:
            dp = -float(new_shed) * fleet.weight / 1e6 / s_base
            shed_at[tk] = shed_at.get(tk, 0.0) + dp
            events.append(PowerEvent(tk, dp))
        if not status_sent and tk >= t_ev + run.center_delay_s:
            status_sent = True
            for a in agents:
                p = Telemetry(tk, float(fleet.watts[a.outlet_id]), a.phase is not Phase.OFF)
                bus.schedule(Message(MessageKind.TELEMETRY, a.outlet_id, "center", p, tk))
        if status_sent and not cmds_sent and tk >= t_ev + run.center_delay_s + 0.5:
            cmds_sent = True
            observed = {r.outlet_id: r.switch_on for r in reg.records.values() if r.last_report > t_ev}
            outlet_blocks = {i: int(fleet.group[i]) + 1 for i in range(fleet.size)}
            for oid, c in direct_shed_commands(
                sc.event.loss_mw, setup.delta_p_s_mw, blocks, outlet_blocks, observed
            ):
                bus.schedule(Message(MessageKind.COMMAND, "center", oid, c, tk))
                commands.append((tk, oid, c))

    shed_events = [PowerEvent(t, dp) for t, dp in sorted(shed_at.items())]
    all_events = [PowerEvent(t_ev, loss_pu)] + shed_events
    # nadir on a 1 ms grid
    fine = np.arange(0.0, run.closed_loop_duration_s + 1e-9, 1e-3) + t_ev
    dev_fine = np.zeros_like(fine)
    for ev in all_events:
        dev_fine += np.asarray(delta_f(dpw, ev.delta_p, fine - ev.time))
    nadir_with = float(fn * (1.0 + dev_fine.min()))
    base_fine = fn * (1.0 + np.asarray(delta_f(dpw, loss_pu, fine - t_ev)))
    nadir_without = float(base_fine.min())

    f_without = fn * (1.0 + np.asarray(delta_f(dpw, loss_pu, t_grid - t_ev)))
    r_with = np.asarray(rocof_multi(dpw, all_events, t_grid)) * fn
    r_without = np.asarray(rocof_multi(dpw, [PowerEvent(t_ev, loss_pu)], t_grid)) * fn
    off = off_vector()
    frac, acc = _group_stats(fleet, off, blocks)
    lat = [
        a.decision_time - t_ev
        for a in active
        if any(e.cause in (CAUSE_LOCAL, CAUSE_STAY_ON) for e in a.decision_log)
    ]
    report = TrialReport(
        shed_mw=float(np.sum(fleet.watts[off])) * fleet.weight / 1e6,
        outlets_off=int(off.sum()),
        outlets_off_represented=float(off.sum()) * fleet.weight,
        group_off_fraction=frac,
        group_accumulated_mw=acc,
        target_mw=max(sc.event.loss_mw - setup.delta_p_s_mw, 0.0),
        nadir_hz=nadir_with,
        nadir_without_hz=nadir_without,
        latencies=np.asarray(lat),
        extra={
            "f_nadir_formula_hz": f_nadir(dpw, loss_pu),
            "off_by_cause": _count_causes(agents),
        },
    )
    return ClosedLoopResult(
        with_gs=Trajectory(t_grid, f_with, r_with),
        without_gs=Trajectory(t_grid, f_without, r_without),
        report=report,
        agents=agents,
        bus=bus,
        commands=commands,
        shed_events=shed_events,
    )


def _count_causes(agents: Sequence[OutletAgent]) -> dict[str, int]:
    out: dict[str, int] = {}
    for a in agents:
        if a.phase is Phase.OFF:
            cause = a.decision_log[-1].cause if a.decision_log else "unknown"
            out[cause] = out.get(cause, 0) + 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayResult:
    agent: OutletAgent
    detect_time: float
    lse_time: float
    lse_estimate: float  # reporting base
    decision_time: float
    final_estimate: float  # reporting base
    curve: list[tuple[float, float]]


def replay(trajectory: Trajectory, bundle: ParameterBundle | None, setup: Setup, noise: NoiseModel) -> ReplayResult:
    """Drive one agent from a recorded frequency stream."""
    if bundle is None:
        raise NoBundleError()
    agent = OutletAgent(setup.agent_config(bundle, noise), outlet_id=bundle.block_id, record_curve=True)
    agent.feed(trajectory.t.tolist(), trajectory.f_hz.tolist())
    lse_t = next((e.t for e in agent.decision_log if e.cause == CAUSE_LSE), math.nan)
    scale = bundle.derived.params.s_base / setup.scenario.run.report_base_mva
    return ReplayResult(
        agent=agent,
        detect_time=agent.detect_time,
        lse_time=lse_t,
        lse_estimate=agent.lse_result * scale if agent.lse_result is not None else math.nan,
        decision_time=agent.decision_time,
        final_estimate=agent.ekf.delta_p * scale if agent.ekf is not None else math.nan,
        curve=list(agent.estimate_curve),
    )


def median(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return statistics.median(vals) if vals else math.nan

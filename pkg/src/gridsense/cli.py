"""Command-line driver: one subcommand per reproduced table or figure.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
Every emitted file starts with ``#`` header lines carrying the tool version,
scenario hash and seed, and nothing time-dependent, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .agent import NoBundleError, write_decision_log
from .control import bundle_from_dict, table_rows_for_csv, write_command_log
from .harness import (
    TABLE2_CASES,
    TABLE3_EDGES,
    TABLE4_EDGES,
    TABLE5_EDGES,
    Setup,
    replay,
    run_closed_loop,
    run_condition_mc,
    run_estimation_mc,
    run_group_experiment,
)
from .scenario import Scenario, ScenarioError, build_ieee24, load_scenario
from .sfr import (
    InvalidInputError,
    NoiseModel,
    PowerEvent,
    TrajectoryParseError,
    derive,
    read_trajectory_csv,
    sample_trajectory,
    t_nadir,
    threshold_power_loss,
    write_trajectory_csv,
)

log = logging.getLogger("gridsense")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

FULL_TRIALS = 1_000_000
FULL_OUTLETS = 1_000_000
DEFAULT_PARAM_NOISE = 0.05


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# plumbing


class _Run:
    """Resolved scenario, seed and output directory for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        if args.scenario:
            sc = load_scenario(args.scenario)
        else:
            sc = build_ieee24()
        over = {}
        if args.seed is not None:
            over["run__seed"] = args.seed
        if args.trials is not None:
            if args.trials < 1:
                raise UsageError("--trials must be >= 1")
            over["run__trials"] = args.trials
        elif args.full_scale:
            over["run__trials"] = FULL_TRIALS
        if args.full_scale:
            over["fleet__outlets"] = FULL_OUTLETS
        self.source_digest = sc.digest()
        self.scenario: Scenario = sc.with_overrides(**over) if over else sc
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def seed(self) -> int:
        return self.scenario.run.seed

    def header(self, what: str) -> list[str]:
        return [
            f"gridsense {__version__}",
            f"artifact {what}",
            f"scenario {self.scenario.name} sha256={self.source_digest}",
            f"resolved sha256={self.scenario.digest()}",
            f"seed {self.seed}",
        ]

    def write_csv(self, name: str, columns: Sequence[str], rows: Iterable[Sequence], what: str) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            for line in self.header(what):
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        return path

    def write_summary(self, name: str, items: Sequence[tuple[str, object]], what: str) -> Path:
        path = self.out / name
        lines = [f"# {h}" for h in self.header(what)]
        lines += [f"{k}={_cell(v)}" for k, v in items]
        path.write_text("\n".join(lines) + "\n")
        for k, v in items:
            print(f"{k}={_cell(v)}")
        return path


def _cell(x: object) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _timed(label: str):
    class _T:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, *exc):
            log.info("%s took %.1f s", label, time.perf_counter() - self.t0)

    return _T()


# ---------------------------------------------------------------------------
# subcommands


def cmd_derive(run: _Run) -> int:
    sc = run.scenario
    if sc.f_s >= sc.system.f_nominal:
        # no band below f_s: only the threshold is meaningful
        d = derive(sc.system)
        dp = threshold_power_loss(d, sc.f_s) * sc.system.s_base
        run.write_summary("derive.txt", [("t_nadir_s", t_nadir(d)), ("delta_p_s_mw", dp)], "derive")
        print("warning: f_s is not below nominal; table1 and bundle skipped", file=sys.stderr)
        return EXIT_OK
    setup = Setup.from_scenario(sc)
    d = setup.derived
    items = [
        ("omega_n", d.omega_n),
        ("zeta", d.zeta),
        ("omega_r", d.omega_r),
        ("alpha", d.alpha),
        ("phi", d.phi),
        ("phi1", d.phi1),
        ("k_lse", d.k_lse),
        ("t_nadir_s", t_nadir(d)),
        ("delta_p_s_mw", setup.delta_p_s_mw),
        ("delta_p_s_mw_2dp", f"{setup.delta_p_s_mw:.2f}"),
    ]
    run.write_summary("derive.txt", items, "derive")
    run.write_csv(
        "table1.csv", ("f_low_hz", "f_high_hz", "rocof_threshold_hz_per_s"),
        table_rows_for_csv(setup.table), "table1",
    )
    for lo, hi, g in table_rows_for_csv(setup.table):
        print(f"[{lo:.2f}, {hi:.2f})  {g:+.5f}")
    bundle = setup.block_bundle(run.args.accumulated_mw, run.args.block_mw)
    (run.out / "bundle.json").write_text(bundle.dumps() + "\n")
    return EXIT_OK


def cmd_montecarlo(run: _Run) -> int:
    which = run.args.table
    sc = run.scenario
    n = sc.run.trials
    if which == "table2":
        rows = []
        for case, (loss, mag) in enumerate(TABLE2_CASES):
            with _timed(f"table2 case {case}"):
                res = run_condition_mc(sc, loss, NoiseModel(sc.noise.kind, mag), case=case)
            lo, hi = res.ci()
            rows.append((loss, mag, res.successes, res.trials, res.p, res.stderr, lo, hi))
        run.write_csv(
            "table2.csv",
            ("loss_mw", "noise_hz", "shed_needed", "trials", "p", "stderr", "ci95_lo", "ci95_hi"),
            rows, "table2",
        )
        items = [(f"p_{int(r[0])}mw_{r[1]:g}hz", r[4]) for r in rows]
        run.write_summary("table2_summary.txt", items + [("trials", n)], "table2")
        return EXIT_OK

    param_noise = 0.0
    if which == "table5":
        param_noise = sc.noise.param_noise or DEFAULT_PARAM_NOISE
    with _timed(which):
        res = run_estimation_mc(sc, param_noise=param_noise)
    if which == "table3":
        h = res.hist("lse", TABLE3_EDGES)
        items = [
            ("share_4_5", h.share(4.0, 5.0)),
            ("share_5_6", h.share(5.0, 6.0)),
            ("within_4pct", res.within("lse")),
        ]
    else:
        h = res.hist("ekf", TABLE4_EDGES if which == "table4" else TABLE5_EDGES)
        items = [
            ("within_4pct", res.within("ekf")),
            ("lse_within_4pct", res.within("lse")),
            ("param_noise", param_noise),
        ]
    run.write_csv(f"{which}.csv", ("bin_pu", "count", "share"), h.rows(), which)
    run.write_summary(f"{which}_summary.txt", items + [("trials", n)], which)
    return EXIT_OK


def cmd_groups(run: _Run) -> int:
    sc = run.scenario
    pn = run.args.param_noise
    with _timed("groups"):
        rep = run_group_experiment(sc, param_noise=pn)
    rows = [
        (g + 1, rep.group_accumulated_mw[g], rep.group_off_fraction[g])
        for g in range(len(rep.group_off_fraction))
    ]
    suffix = "" if not pn else "_param"
    run.write_csv(f"groups{suffix}.csv", ("group", "accumulated_mw", "off_fraction"), rows, "groups")
    all_off, mixed, all_on = rep.bands()
    items = [
        ("shed_mw", rep.shed_mw),
        ("target_mw", rep.target_mw),
        ("outlets_off", rep.outlets_off),
        ("outlets_off_represented", rep.outlets_off_represented),
        ("groups_all_off", all_off),
        ("groups_mixed", mixed),
        ("groups_all_on", all_on),
        ("band_pattern_ok", rep.band_pattern_ok()),
        ("param_noise", pn),
    ]
    run.write_summary(f"groups{suffix}_summary.txt", items, "groups")
    return EXIT_OK


def cmd_closedloop(run: _Run) -> int:
    sc = run.scenario
    with _timed("closedloop"):
        res = run_closed_loop(sc, outlets=run.args.outlets, post_event_drop=run.args.post_event_drop)
    h = run.header
    write_trajectory_csv(run.out / "fig22_with.csv", res.with_gs, h("fig22_with"))
    write_trajectory_csv(run.out / "fig22_without.csv", res.without_gs, h("fig22_without"))
    write_decision_log(run.out / "decisions.csv", res.agents, h("decisions"))
    write_command_log(run.out / "commands.csv", res.commands, h("commands"))
    res.bus.write_trace(run.out / "trace.csv", h("trace"))
    rep = res.report
    items = [
        ("nadir_with_hz", rep.nadir_hz),
        ("nadir_without_hz", rep.nadir_without_hz),
        ("f_nadir_formula_hz", rep.extra["f_nadir_formula_hz"]),
        ("median_latency_s", rep.median_latency),
        ("shed_mw", rep.shed_mw),
        ("outlets_off", rep.outlets_off),
        ("commands", len(res.commands)),
    ]
    items += [(f"off_{k}", v) for k, v in rep.extra["off_by_cause"].items()]
    run.write_summary("closedloop_summary.txt", items, "closedloop")
    return EXIT_OK


def cmd_replay(run: _Run) -> int:
    traj = read_trajectory_csv(run.args.trajectory)
    if run.args.bundle is None:
        raise NoBundleError()
    try:
        bundle = bundle_from_dict(json.loads(Path(run.args.bundle).read_text()))
    except FileNotFoundError:
        raise UsageError(f"bundle file not found: {run.args.bundle}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise UsageError(f"{run.args.bundle}: malformed bundle ({exc})") from None
    setup = Setup.from_scenario(run.scenario)
    res = replay(traj, bundle, setup, NoiseModel(run.scenario.noise.kind, run.args.noise))
    write_decision_log(run.out / "decisions.csv", [res.agent], run.header("replay decisions"))
    run.write_csv("ekf_curve.csv", ("t_s", "delta_p_est_pu"), res.curve, "replay ekf curve")
    items = [
        ("detect_time_s", res.detect_time),
        ("lse_time_s", res.lse_time),
        ("lse_estimate_pu", res.lse_estimate),
        ("decision_time_s", res.decision_time),
        ("final_estimate_pu", res.final_estimate),
        ("decision", res.agent.decision),
    ]
    run.write_summary("replay_summary.txt", items, "replay")
    return EXIT_OK


def cmd_trajectory(run: _Run) -> int:
    sc = run.scenario
    setup = Setup.from_scenario(sc)
    a = run.args
    loss = sc.event.loss_mw if a.loss_mw is None else a.loss_mw
    mag = sc.noise.magnitude if a.noise is None else a.noise
    traj = sample_trajectory(
        setup.derived,
        [PowerEvent(0.0, loss / sc.system.s_base)],
        a.duration,
        NoiseModel(sc.noise.kind, mag),
        seed=[run.seed, 11],
    )
    write_trajectory_csv(run.out / a.name, traj, run.header(f"trajectory loss_mw={loss!r} noise_hz={mag!r}"))
    print(run.out / a.name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario TOML (default: built-in ieee24)")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--trials", type=int, help="override [run] trials")
    common.add_argument("--full-scale", action="store_true", help="1e6 trials and outlets")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="gridsense", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridsense {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("derive", parents=[common], help="derived constants, table1.csv, bundle.json")
    s.add_argument("--accumulated-mw", type=float, default=100.0, help="accumulated power of the exported bundle")
    s.add_argument("--block-mw", type=float, default=1.0, help="block power of the exported bundle")
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("montecarlo", parents=[common], help="tables 2 to 5")
    s.add_argument("table", choices=("table2", "table3", "table4", "table5"))
    s.set_defaults(func=cmd_montecarlo)

    s = sub.add_parser("groups", parents=[common], help="per-group shedding on a scaled fleet")
    s.add_argument("--param-noise", type=float, default=0.0)
    s.set_defaults(func=cmd_groups)

    s = sub.add_parser("closedloop", parents=[common], help="frequency with and without shedding")
    s.add_argument("--outlets", type=int, help="simulated outlets (default [run] closed_loop_outlets)")
    s.add_argument("--post-event-drop", type=float, help="drop probability on every link after the event")
    s.set_defaults(func=cmd_closedloop)

    s = sub.add_parser("replay", parents=[common], help="drive one agent from a trajectory CSV")
    s.add_argument("trajectory")
    s.add_argument("--bundle", help="parameter bundle JSON (see derive)")
    s.add_argument("--noise", type=float, default=0.01, help="noise magnitude assumed by the EKF, Hz")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("trajectory", parents=[common], help="export a sampled noisy trajectory")
    s.add_argument("--loss-mw", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--duration", type=float, default=5.0)
    s.add_argument("--name", default="trajectory.csv")
    s.set_defaults(func=cmd_trajectory)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        run = _Run(args)
        return args.func(run)
    except (ScenarioError, TrajectoryParseError, InvalidInputError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoBundleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

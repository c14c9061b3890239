#!/usr/bin/env python3
"""Recompute the calibrated IEEE 24-bus constants.

Prints the TOML [system] lines for h, r and s_base, plus the bucketed fleet
aggregate on the same base for comparison. With --check, exits 1 if the
shipped scenario file disagrees with a fresh calibration.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from gridsense.calibration import calibrate_ieee24, fleet_aggregate
from gridsense.scenario import load_scenario

ROOT = Path(__file__).resolve().parent.parent
DEFAULT_SCENARIO = ROOT / "scenarios" / "ieee24.toml"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true", help="compare against the shipped scenario")
    ap.add_argument("--scenario", default=str(DEFAULT_SCENARIO))
    ap.add_argument("--rel-tol", type=float, default=1e-9)
    args = ap.parse_args(argv)

    cal = calibrate_ieee24()
    print(f"h = {cal.h!r}")
    print(f"r = {cal.r!r}")
    print(f"s_base = {cal.s_base!r}")
    print(f"# t_nadir = {cal.t_nadir:.6f} s, delta_p_s = {cal.delta_p_s_mw:.6f} MW, top row = {cal.top_row:.6f} Hz/s")
    h_f, r_f = fleet_aggregate(cal.s_base)
    print(f"# bucketed fleet on this base: h = {h_f:.4f}, r = {r_f:.5f}")

    if not args.check:
        return 0
    sysp = load_scenario(args.scenario).system
    bad = [
        (name, shipped, fresh)
        for name, shipped, fresh in (("h", sysp.h, cal.h), ("r", sysp.r, cal.r), ("s_base", sysp.s_base, cal.s_base))
        if not math.isclose(shipped, fresh, rel_tol=args.rel_tol)
    ]
    for name, shipped, fresh in bad:
        print(f"mismatch {name}: shipped {shipped!r}, fresh {fresh!r}", file=sys.stderr)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())

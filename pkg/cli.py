"""
Command line front end.

    mfelattice solve     --scenario S --out DIR
    mfelattice analyze   --scenario S --out DIR
    mfelattice converge  --scenario S --out DIR [--np 100,1000,10000] [--replications 200] [--threads K]
    mfelattice compare   --scenario A --scenario B --out DIR

Only converge runs work in parallel; --threads and MFE_THREADS apply to it alone.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np
import pandas as pd

from .distribution_analyzer import (
    PercentileConvention,
    build_report,
    forward_joint_law,
    marginal_price_distribution,
    risk_neutral_law,
)
from .equilibrium_solver import CLEARING_TOL, solve
from .errors import EXIT_INVALID, EXIT_OK, InputError, MfeError, ScenarioValidationError
from .finite_agent_sim import convergence_study
from .market_model import load_scenario

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"
DEFAULT_NP = (100, 1000, 10000)
DEFAULT_REPLICATIONS = 200
DEFAULT_TAIL_QUANTILES = (0.05, 0.95)


def write_csv(frame, path, scenario_hash):
    """CSV with a leading scenario hash comment and fixed float formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# scenario_sha256: {scenario_hash}\n")
        frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_json(payload, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(path, args):
    """Load a scenario and apply command line overrides to its analysis options."""
    try:
        scenario = load_scenario(path)
    except OSError as exc:
        raise InputError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"scenario {path} is not valid JSON: {exc}") from exc
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "percentile_convention", None):
        overrides["percentile_convention"] = args.percentile_convention
    if getattr(args, "excess_return_convention", None):
        overrides["excess_return_convention"] = args.excess_return_convention
    if getattr(args, "path_mode", False):
        overrides["path_mode"] = True
    if overrides:
        analysis = dataclasses.replace(scenario.analysis, **overrides)
        scenario = dataclasses.replace(scenario, analysis=analysis)
    return scenario


def _threads(args):
    if args.threads is not None:
        return args.threads
    try:
        return max(1, int(os.environ.get("MFE_THREADS", "1")))
    except ValueError:
        raise InputError(f"MFE_THREADS must be an integer, got {os.environ['MFE_THREADS']!r}")


def p_frame(solution):
    rows = []
    for n, table in enumerate(solution.p):
        k, j = np.indices(table.shape)
        rows.append(pd.DataFrame({
            "n": n,
            "stock_idx": k.ravel(),
            "y_idx": j.ravel(),
            "p_up": table.ravel(),
        }))
    return pd.concat(rows, ignore_index=True)


def phi_frame(solution, full=False):
    """Per-node phi summary, or every (population, z, type) cell when full is set."""
    rows = []
    for n in range(solution.lattice.N):
        if not full:
            k, j = np.indices(solution.supply[n].shape)
            rows.append(pd.DataFrame({
                "n": n,
                "stock_idx": k.ravel(),
                "y_idx": j.ravel(),
                "phi_mean": solution.phi_mean[n].ravel(),
                "phi_rms": np.sqrt(np.maximum(solution.phi_sq[n], 0.0)).ravel(),
                "supply": solution.supply[n].ravel(),
            }))
            continue
        for i in range(len(solution.scenario.populations)):
            table = solution.phi_table(n, i)
            k, j, z, t = np.indices(table.shape)
            rows.append(pd.DataFrame({
                "n": n,
                "population": i,
                "stock_idx": k.ravel(),
                "y_idx": j.ravel(),
                "z_idx": z.ravel(),
                "type_idx": t.ravel(),
                "phi": table.ravel(),
            }))
    return pd.concat(rows, ignore_index=True)


def cmd_solve(args):
    scenario = _load(args.scenario[0], args)
    solution = solve(scenario, phi_steps=None if args.full_phi else ())
    law = forward_joint_law(solution)
    os.makedirs(args.out, exist_ok=True)
    digest = scenario.content_hash
    write_csv(p_frame(solution), os.path.join(args.out, "p_table.csv"), digest)
    write_csv(phi_frame(solution, args.full_phi), os.path.join(args.out, "phi_table.csv"), digest)
    p_min = min(float(t.min()) for t in solution.p)
    p_max = max(float(t.max()) for t in solution.p)
    write_json({
        "scenario_sha256": digest,
        "layout": solution.layout,
        "steps": scenario.lattice.N,
        "populations": len(scenario.populations),
        "checks": {
            "clearing_max_residual": solution.max_residual,
            "clearing_tolerance": CLEARING_TOL,
            "clearing_ok": solution.max_residual <= CLEARING_TOL,
            "p_min": p_min,
            "p_max": p_max,
            "p_in_open_unit_interval": 0.0 < p_min and p_max < 1.0,
            "terminal_mass": float(law.nodes[-1].sum()),
        },
    }, os.path.join(args.out, "manifest.json"))
    print(f"solved {scenario.lattice.N} steps, max clearing residual {solution.max_residual:.3e}")
    return EXIT_OK


def cmd_analyze(args):
    scenario = _load(args.scenario[0], args)
    solution = solve(scenario, phi_steps=())
    report = build_report(solution)
    os.makedirs(args.out, exist_ok=True)
    for name, frame in report.to_frames().items():
        write_csv(frame, os.path.join(args.out, f"{name}.csv"), scenario.content_hash)
    write_json(report.metadata, os.path.join(args.out, "report.json"))
    final = report.excess_returns[(report.excess_returns["measure"] == "P")]["excess_return"].iloc[-1]
    print(f"excess return at T={scenario.lattice.T:g}y: {final:.6f}")
    return EXIT_OK


def _np_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--np expects comma separated integers, got {text!r}")


def cmd_converge(args):
    scenario = _load(args.scenario[0], args)
    np_values = _np_list(args.np) if args.np else list(DEFAULT_NP)
    seed = scenario.analysis.seed
    report = convergence_study(scenario, np_values, args.replications, seed, threads=_threads(args))
    os.makedirs(args.out, exist_ok=True)
    write_csv(report.samples, os.path.join(args.out, "convergence.csv"), scenario.content_hash)
    summary = report.summary()
    summary["scenario_sha256"] = scenario.content_hash
    write_json(summary, os.path.join(args.out, "convergence.json"))
    if report.degenerate:
        print("excess demand vanishes identically; slope undefined")
    else:
        print(f"log-log slope {report.slope:.4f} (95% CI {report.slope_ci[0]:.4f}, {report.slope_ci[1]:.4f})")
    return EXIT_OK


def compare_frames(solution_a, solution_b, steps, lower=None, upper=None):
    """Paired price distributions and moment differences of two solutions on one lattice."""
    lat = solution_a.lattice
    law_a = forward_joint_law(solution_a)
    law_b = forward_joint_law(solution_b)
    q_law = risk_neutral_law(lat, solution_a.scenario.y_chain)
    paired, moments = [], []
    for n in steps:
        dist_a = marginal_price_distribution(law_a, n)
        dist_b = marginal_price_distribution(law_b, n)
        bench = marginal_price_distribution(q_law, n)
        lo = bench.quantile(DEFAULT_TAIL_QUANTILES[0]) if lower is None else lower
        hi = bench.quantile(DEFAULT_TAIL_QUANTILES[1]) if upper is None else upper
        paired.append(pd.DataFrame({
            "n": n,
            "s": dist_a.prices,
            "prob_a": dist_a.probs,
            "prob_b": dist_b.probs,
            "prob_diff": dist_b.probs - dist_a.probs,
        }))
        tail_a = dist_a.tail_mass(lo, hi)
        tail_b = dist_b.tail_mass(lo, hi)
        moments.append({
            "n": n,
            "t": n * lat.dt,
            "mean_a": dist_a.mean,
            "mean_b": dist_b.mean,
            "mean_diff": dist_b.mean - dist_a.mean,
            "var_a": dist_a.variance,
            "var_b": dist_b.variance,
            "var_diff": dist_b.variance - dist_a.variance,
            "lower": lo,
            "upper": hi,
            "lower_tail_a": tail_a[0],
            "lower_tail_b": tail_b[0],
            "lower_tail_diff": tail_b[0] - tail_a[0],
            "upper_tail_a": tail_a[1],
            "upper_tail_b": tail_b[1],
            "upper_tail_diff": tail_b[1] - tail_a[1],
        })
    return pd.concat(paired, ignore_index=True), pd.DataFrame(moments)


def cmd_compare(args):
    if len(args.scenario) != 2:
        raise InputError("compare needs exactly two --scenario arguments")
    scenario_a = _load(args.scenario[0], args)
    scenario_b = _load(args.scenario[1], args)
    if scenario_a.lattice != scenario_b.lattice:
        raise InputError(f"scenarios do not share a lattice: {scenario_a.lattice} vs {scenario_b.lattice}")
    solution_a = solve(scenario_a, phi_steps=())
    solution_b = solve(scenario_b, phi_steps=())
    lat = scenario_a.lattice
    steps = scenario_a.analysis.report_steps or tuple(range(1, lat.N + 1))
    paired, moments = compare_frames(solution_a, solution_b, steps, args.lower, args.upper)
    digest = f"{scenario_a.content_hash} {scenario_b.content_hash}"
    os.makedirs(args.out, exist_ok=True)
    write_csv(paired, os.path.join(args.out, "compare_distributions.csv"), digest)
    write_csv(moments, os.path.join(args.out, "compare_moments.csv"), digest)
    last = moments.iloc[-1]
    print(f"step {int(last['n'])}: mean diff {last['mean_diff']:.6g}, variance diff {last['var_diff']:.6g}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mfelattice",
                                     description="Mean-field equilibrium on a binomial lattice")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", action="append", required=True, help="scenario JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override analysis.seed")
        p.add_argument("--percentile-convention", choices=[c.value for c in PercentileConvention], default=None)
        p.add_argument("--excess-return-convention", choices=["log", "simple"], default=None)
        p.add_argument("--path-mode", action="store_true", help="use the path-indexed solver")
        return p

    common(sub.add_parser("solve", help="solve for equilibrium probabilities")).add_argument(
        "--full-phi", action="store_true", help="write every phi cell instead of the per-node summary")
    common(sub.add_parser("analyze", help="price distributions, excess returns and volume"))
    converge = common(sub.add_parser("converge", help="finite population convergence study"))
    converge.add_argument("--np", default=None, help="comma separated population sizes")
    converge.add_argument("--replications", type=int, default=DEFAULT_REPLICATIONS)
    converge.add_argument("--threads", type=int, default=None,
                          help="worker threads for the replications (default MFE_THREADS or 1)")
    compare = common(sub.add_parser("compare", help="compare two scenarios on one lattice"))
    compare.add_argument("--lower", type=float, default=None, help="lower tail threshold")
    compare.add_argument("--upper", type=float, default=None, help="upper tail threshold")
    return parser


COMMANDS = {
    "solve": cmd_solve,
    "analyze": cmd_analyze,
    "converge": cmd_converge,
    "compare": cmd_compare,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ScenarioValidationError as exc:
        for violation in exc.violations:
            print(f"error: [{violation.code}] {violation.message}", file=sys.stderr)
        return exc.exit_code
    except MfeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except IndexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

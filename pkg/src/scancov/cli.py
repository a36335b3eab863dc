"""Command-line entry points.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad arguments, unreadable or unparsable input, unknown bench suite
  3  planning failure (including a mesh with no faces)
  4  mission failure (collision or timeout); metrics are still written
"""
import argparse
import json
import logging
import os
import sys
import time

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_PLAN, EXIT_MISSION = 0, 1, 2, 3, 4

PREDICTORS = {"gt": "oracle_gt", "observed": "observed_only", "noisy": "noisy"}
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")

log = logging.getLogger("scancov")


def _cap_threads():
    """Honour SCANCOV_THREADS before numeric libraries start their pools."""
    n = os.environ.get("SCANCOV_THREADS")
    if not n:
        return
    try:
        n = max(int(n), 1)
    except ValueError:
        return
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="scancov", description="Coverage planning for mesh inspection.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    pl = sub.add_parser("plan", help="one global coverage plan for a mesh")
    pl.add_argument("mesh", help="OBJ file")
    pl.add_argument("--pose", nargs=5, type=float, metavar=("X", "Y", "Z", "PITCH", "YAW"),
                    default=None, help="drone pose (default: 3 m beyond the mesh along -x)")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", default="plan_out")

    sm = sub.add_parser("simulate", help="closed-loop coverage mission")
    sm.add_argument("scenario", help="scenario JSON file, or corpus:<name> for a built-in scene")
    sm.add_argument("--predictor", choices=sorted(PREDICTORS), default="gt")
    sm.add_argument("--mode", choices=("async", "serial", "deterministic"), default="deterministic")
    sm.add_argument("--deterministic", action="store_true", help="same as --mode deterministic")
    sm.add_argument("--variant", choices=("full", "no-cagp", "no-vcto"), default="full")
    sm.add_argument("--seed", type=int, default=None)
    sm.add_argument("--out", default="sim_out")
    sm.add_argument("--t-max", type=float, default=None)

    bn = sub.add_parser("bench", help="benchmark suites: cfgspace, atsp, ablation")
    bn.add_argument("suite")
    bn.add_argument("--out", default="bench_out")
    bn.add_argument("--seeds", type=int, default=None, help="ablation: number of seeds")
    bn.add_argument("--scenario", default=None, help="ablation: corpus scenario name")
    return p


def _fail(code, msg):
    print(f"scancov: {msg}", file=sys.stderr)
    return code


def cmd_plan(args):
    import numpy as np
    from .geometry import MeshFormatError, load_mesh
    from .routing import PlannerConfig, plan_global
    from .viewpoints import write_viewpoints_csv

    try:
        mesh = load_mesh(args.mesh)
    except (OSError, MeshFormatError, ValueError, IndexError) as e:
        return _fail(EXIT_USAGE, f"cannot read mesh: {e}")
    if mesh.n_faces == 0:
        return _fail(EXIT_PLAN, "mesh has no faces")
    if args.pose is None:
        lo, hi = mesh.bounds
        c = 0.5 * (lo + hi)
        pose = np.array([lo[0] - 3.0, c[1], c[2], 0.0, 0.0])
    else:
        pose = np.array(args.pose, dtype=float)
    t0 = time.perf_counter()
    try:
        gp = plan_global(mesh, np.arange(mesh.n_vertices), pose, None, None, PlannerConfig(seed=args.seed))
    except Exception as e:  # any planner error is a planning failure
        log.debug("planning failed", exc_info=True)
        return _fail(EXIT_PLAN, f"planning failed: {e}")
    wall = time.perf_counter() - t0
    if not gp.viewpoints:
        return _fail(EXIT_PLAN, "planning produced no viewpoints")
    os.makedirs(args.out, exist_ok=True)
    write_viewpoints_csv(gp.viewpoints, os.path.join(args.out, "viewpoints.csv"))
    with open(os.path.join(args.out, "path.jsonl"), "w") as fh:
        gp.path.to_jsonl(fh)
    summary = {"viewpoints": len(gp.viewpoints), "groups": len(gp.groups),
               "tour_cost": float(f"{gp.tour_cost:.6g}"), "path_length": float(f"{gp.path.length:.6g}"),
               "uncovered_vertices": int(len(gp.residual)), "wall_s": float(f"{wall:.6g}")}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def _load_scenario(spec):
    from .scenarios import CORPUS, ScenarioError, builtin_scenario, load_scenario
    if spec.startswith("corpus:"):
        name = spec.split(":", 1)[1]
        if name not in CORPUS:
            raise ScenarioError(f"unknown corpus scenario {name!r}; choose from {', '.join(CORPUS)}")
        return builtin_scenario(name)
    return load_scenario(spec)


def cmd_simulate(args):
    from .scenarios import ScenarioError
    from .simulator import MissionConfig, run_mission, write_metrics_csv

    try:
        sc = _load_scenario(args.scenario)
    except ScenarioError as e:
        return _fail(EXIT_USAGE, f"bad scenario: {e}")
    mode = "deterministic" if args.deterministic else args.mode
    seed = sc.seed if args.seed is None else args.seed
    cfg = MissionConfig(args.variant, mode, t_max=args.t_max if args.t_max is not None else sc.t_max)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "trajectory.jsonl"), "w") as fh:
        rec, _ = run_mission(sc, PREDICTORS[args.predictor], cfg, seed, trace_fh=fh)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        write_metrics_csv([rec.row(0, args.variant, seed, timing=mode != "deterministic")], fh)
    status = "success" if rec.success else f"failed ({rec.fail_cause})"
    print(f"{status}: flight {rec.flight_time:.6g} s, completeness {rec.completeness:.6g} %, "
          f"min clearance {rec.min_clearance:.6g} m")
    return EXIT_OK if rec.success else EXIT_MISSION


def cmd_bench(args):
    from .bench import SUITES, run_suite
    if args.suite not in SUITES:
        return _fail(EXIT_USAGE, f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    seeds = range(args.seeds) if args.seeds else None
    print(run_suite(args.suite, args.out, seeds=seeds, scenario=args.scenario), end="")
    return EXIT_OK


def main(argv=None):
    _cap_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"plan": cmd_plan, "simulate": cmd_simulate, "bench": cmd_bench}[args.command]
    try:
        return handler(args)
    except KeyboardInterrupt:
        return _fail(EXIT_ERROR, "interrupted")


if __name__ == "__main__":
    sys.exit(main())

"""Command-line harness: scenario files in, CSV/JSON artifacts and exit codes out.

Exit codes: 0 success, 1 assumption or convergence failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .continuum import (
    LegendreBank,
    continuum_energy,
    continuum_poisson_solve,
    gamma_limsup_sweep,
    gamma_verdict,
    minimizer_sweep,
    minimizer_verdict,
    run_id,
)
from .energy import discrete_energy
from .graphon import (
    Kernel,
    check_assumption_L3,
    check_assumption_L3_point_cloud,
    l1_distance,
    lift_matrix,
    lengths_from_point_cloud,
    sample_graph_from_graphon,
)
from .kirchhoff import solve_kirchhoff, verify_kirchhoff_estimate
from .model import (
    AssumptionViolation,
    GraphInstance,
    GraphonFluxError,
    IncompatibleDataError,
    ModelParams,
    SingularSystemError,
    SourceDensity,
    check_min_degree_bound,
    connectivity_constant,
    load_graph,
    sources_from_density,
)
from .optimizer import OptimizerOptions, gradient_flow_integrate, minimize_discrete

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class Scenario:
    graphon: Kernel
    lengths: object  # Kernel or {"kind": "point_cloud", ...}
    sigma: SourceDensity
    params: ModelParams
    n_list: list
    seed: int = 0
    output_dir: Path = Path("out")
    conductivity: Kernel | None = None
    graph: GraphInstance | None = None
    length_floor: float = 0.0
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict, base: Path = Path(".")) -> "Scenario":
        try:
            n_list = [int(n) for n in obj.get("n_list", [])]
            if any(b <= a for a, b in zip(n_list, n_list[1:])):
                raise UsageError("n_list must be strictly increasing")
            lengths = obj.get("lengths", {"kind": "constant", "value": 1.0})
            if lengths.get("kind") == "point_cloud":
                lengths = {"kind": "point_cloud", "dim": int(lengths.get("dim", 2)),
                           "floor": float(lengths.get("floor", 0.1))}
            else:
                lengths = Kernel.from_json(lengths)
            graph = None
            if "graph" in obj:
                graph = load_graph(base / obj["graph"])
            cond = obj.get("conductivity")
            return cls(
                graphon=Kernel.from_json(obj.get("graphon", {"kind": "constant", "value": 1.0})),
                lengths=lengths,
                sigma=SourceDensity.from_json(obj.get("sigma", {"kind": "cosine", "k": 1})),
                params=ModelParams.from_json(obj.get("params", {})),
                n_list=n_list,
                seed=int(obj.get("seed", 0)),
                output_dir=Path(obj.get("output_dir", "out")),
                conductivity=Kernel.from_json(cond) if cond is not None else None,
                graph=graph,
                length_floor=float(obj.get("length_floor", 0.0)),
                raw=obj,
            )
        except GraphonFluxError:
            raise
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise UsageError(f"invalid scenario: {exc!r}") from exc

    @property
    def is_point_cloud(self) -> bool:
        return isinstance(self.lengths, dict)

    def length_matrix(self, n: int):
        if self.is_point_cloud:
            return lengths_from_point_cloud(self.lengths["dim"], n, self.seed, self.lengths["floor"])
        return self.lengths

    def graph_for(self, n: int) -> GraphInstance:
        if self.graph is not None:
            if self.graph.n != n:
                raise UsageError(f"graph file has {self.graph.n} nodes, requested n={n}")
            return self.graph
        return sample_graph_from_graphon(self.graphon, self.length_matrix(n), n, floor=self.length_floor)

    def conductivity_kernel(self) -> Kernel:
        return self.conductivity if self.conductivity is not None else Kernel.constant_kernel(1.0)

    def conductivities(self, graph: GraphInstance) -> np.ndarray:
        b = self.conductivity_kernel()
        return np.where(graph.adjacency == 1, b.cell_averages(graph.n), 0.0)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _pick_n(sc: Scenario, args) -> int:
    if args.n is not None:
        return args.n
    if sc.graph is not None:
        return sc.graph.n
    if sc.n_list:
        return sc.n_list[-1]
    raise UsageError("no n given (use --n or n_list)")


# --------------------------------------------------------------------------- commands

def cmd_check(sc: Scenario, args) -> int:
    """Assumption report; exit 0 iff every hard check passes."""
    p = sc.params
    ns = [args.n] if args.n is not None else (sc.n_list or [16])
    checks = []

    checks.append({"name": "assS", "hard": True, "passed": True,
                   "value": sc.sigma.integral(0.0, 1.0), "threshold": 0.0,
                   "detail": "source density has zero mean"})

    for n in ns:
        g = sc.graph_for(n)
        lam_hat = connectivity_constant(g)
        checks.append({"name": "A1", "n": n, "hard": True, "passed": bool(lam_hat >= p.lam),
                       "value": lam_hat, "threshold": p.lam})
        checks.append({"name": "min-degree", "n": n, "hard": False,
                       "passed": bool(check_min_degree_bound(g, p.lam)),
                       "value": float(g.degrees().min()), "threshold": (1 + p.lam) * n / 2})

    if sc.graph is None and len(ns) >= 2:
        res = 4 * max(ns)
        l1w = [l1_distance(lift_matrix(sc.graph_for(n).adjacency), sc.graphon, res) for n in ns]
        checks.append({"name": "A2", "hard": True, "passed": bool(l1w[-1] <= l1w[0]),
                       "value": dict(zip(ns, l1w)), "threshold": "non-increasing L1 distance"})
        if not sc.is_point_cloud:
            l1l = [l1_distance(lift_matrix(sc.graph_for(n).lengths), sc.lengths, res) for n in ns]
            checks.append({"name": "L2", "hard": True, "passed": bool(l1l[-1] <= l1l[0] + 1e-12),
                           "value": dict(zip(ns, l1l)), "threshold": "non-increasing L1 distance"})

    if sc.is_point_cloud:
        l3 = check_assumption_L3_point_cloud(sc.lengths["dim"], sc.seed, sc.lengths["floor"], p.gamma)
    else:
        l3 = check_assumption_L3(sc.lengths, p.gamma)
    checks.append({"name": "L3", "hard": True, "passed": l3.finite, "value": l3.norm,
                   "threshold": "finite, refinement-stable", "result": l3.to_json()})

    ok = all(c["passed"] for c in checks if c["hard"])
    report = {"passed": ok, "checks": checks, "params": p.to_json()}
    if args.out or sc.raw.get("output_dir"):
        _write_json(sc.output_dir / "check.json", report)
    _emit(report)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_solve(sc: Scenario, args) -> int:
    n = _pick_n(sc, args)
    g = sc.graph_for(n)
    B = sc.conductivities(g)
    S = sources_from_density(sc.sigma, n)
    P, rep = solve_kirchhoff(g, B, S)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pressures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "S", "P"])
        for i in range(n):
            w.writerow([i + 1, _fmt(S[i]), _fmt(P[i])])
    bound_ok = verify_kirchhoff_estimate(g, sc.params, S, P, sc.sigma.l2_norm_sq(), connectivity_constant(g))
    report = {"n": n, "solve": rep.to_json(), "kirchhoff_bound_ok": bound_ok}
    _write_json(out / "solve.json", report)
    _emit(report)
    return EXIT_OK


def cmd_energy(sc: Scenario, args) -> int:
    n = _pick_n(sc, args)
    g = sc.graph_for(n)
    B = sc.conductivities(g)
    S = sources_from_density(sc.sigma, n)
    e = discrete_energy(g, B, S, sc.params)
    report = {"n": n, "discrete": e.to_json()}
    if sc.graph is None and not sc.is_point_cloud and args.continuum:
        report["continuum"] = continuum_energy(sc.conductivity_kernel(), sc.graphon, sc.lengths,
                                               sc.sigma, sc.params).to_json()
    _write_json(sc.output_dir / "energy.json", report)
    _emit(report)
    return EXIT_OK


def cmd_minimize(sc: Scenario, args) -> int:
    n = _pick_n(sc, args)
    g = sc.graph_for(n)
    S = sources_from_density(sc.sigma, n)
    opts = OptimizerOptions(max_iters=args.max_iters, grad_tol=args.grad_tol, seed=sc.seed)
    B, rep = minimize_discrete(g, S, sc.params, opts)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    iu, ju = g.edges
    with open(out / "conductivities.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "B"])
        for i, j in zip(iu, ju):
            w.writerow([i + 1, j + 1, _fmt(B[i, j])])
    report = {"n": n, "report": rep.to_json()}
    _write_json(out / "minimize.json", report)
    _emit(report)
    return EXIT_OK if rep.converged else EXIT_FAIL


def cmd_flow(sc: Scenario, args) -> int:
    n = _pick_n(sc, args)
    g = sc.graph_for(n)
    S = sources_from_density(sc.sigma, n)
    B0 = np.maximum(sc.conductivities(g), sc.params.r)
    traj = gradient_flow_integrate(g, B0, S, sc.params, args.dt, args.steps)
    sc.output_dir.mkdir(parents=True, exist_ok=True)
    traj.write_csv(sc.output_dir / "flow.csv", g)
    report = {"n": n, "steps": args.steps, "initial_energy": traj.energies[0],
              "final_energy": traj.energies[-1], "min_dt": min(traj.dts) if traj.dts else args.dt}
    _write_json(sc.output_dir / "flow.json", report)
    _emit(report)
    return EXIT_OK


def _jobs(args) -> int:
    env = os.environ.get("GRAPHONFLUX_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"GRAPHONFLUX_JOBS must be an integer, got {env!r}") from exc
    return max(1, args.jobs)


def _sweep_meta(sc: Scenario, mode: str, extra: dict) -> dict:
    meta = {
        "mode": mode,
        "graphon": sc.graphon.to_json(),
        "lengths": sc.lengths if sc.is_point_cloud else sc.lengths.to_json(),
        "sigma": sc.sigma.to_json(),
        "params": sc.params.to_json(),
        "n_list": sc.n_list,
        "seed": sc.seed,
        "version": __version__,
        **extra,
    }
    meta["run_id"] = run_id(meta)
    return meta


def cmd_sweep_gamma(sc: Scenario, args) -> int:
    if sc.is_point_cloud:
        raise UsageError("the gamma sweep needs a length kernel")
    ns = [args.n] if args.n is not None else sc.n_list
    b = sc.conductivity_kernel()
    res = gamma_limsup_sweep(b, sc.graphon, sc.lengths, sc.sigma, sc.params, ns,
                             length_floor=sc.length_floor, jobs=_jobs(args))
    ref = sc.raw.get("reference")
    verdict = gamma_verdict(res, reference_value=ref)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep_gamma.csv")
    meta = _sweep_meta(sc, "gamma", {"conductivity": b.to_json(),
                                     "tolerances": {"continuum_rtol": 1e-4, "quadrature_rtol": 1e-6}})
    _write_json(out / "sweep_gamma.json", {"meta": meta, "verdict": verdict,
                                           "reference": res.reference.to_json() if res.reference else None})
    _emit({"run_id": meta["run_id"], "verdict": verdict})
    return EXIT_FAIL if verdict["verdict"] == "fail" else EXIT_OK


def cmd_sweep_minimizer(sc: Scenario, args) -> int:
    ns = [args.n] if args.n is not None else sc.n_list
    lengths = sc.lengths if not sc.is_point_cloud else sc.length_matrix
    res = minimizer_sweep(sc.graphon, lengths, sc.sigma, sc.params, ns, LegendreBank(),
                          length_floor=sc.length_floor, jobs=_jobs(args))
    verdict = minimizer_verdict(res)
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "sweep_minimizer.csv")
    meta = _sweep_meta(sc, "minimizer", {"tolerances": {"grad_tol": OptimizerOptions().grad_tol}})
    _write_json(out / "sweep_minimizer.json",
                {"meta": meta, "verdict": verdict, "rows": [{"n": r.n, **r.info} for r in res.rows]})
    _emit({"run_id": meta["run_id"], "verdict": verdict})
    return EXIT_FAIL if verdict["verdict"] == "fail" else EXIT_OK


def cmd_poisson(sc: Scenario, args) -> int:
    m = args.m or _pick_n(sc, args)
    b = sc.conductivity_kernel()
    p, diag = continuum_poisson_solve(b, sc.graphon, sc.sigma, m, lambda_hint=sc.params.lam,
                                      r=min(sc.params.r, b.lower_bound))
    out = sc.output_dir
    out.mkdir(parents=True, exist_ok=True)
    p.to_csv(out / "pressure.csv")
    report = diag.to_json()
    _write_json(out / "poisson.json", report)
    _emit(report)
    return EXIT_OK if diag.bound_ok else EXIT_FAIL


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "energy": cmd_energy,
    "minimize": cmd_minimize,
    "flow": cmd_flow,
    "sweep-gamma": cmd_sweep_gamma,
    "sweep-minimizer": cmd_sweep_minimizer,
    "poisson": cmd_poisson,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphonflux", description="Transportation-network energies on graphs and graphons.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("scenario", help="scenario JSON file")
        sp.add_argument("--n", type=int, help="override the resolution / node count")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", help="override the output directory")
        if name.startswith("sweep"):
            sp.add_argument("--jobs", type=int, default=1, help="parallel rows (default 1)")
        if name == "minimize":
            sp.add_argument("--max-iters", type=int, default=20000)
            sp.add_argument("--grad-tol", type=float, default=1e-8)
        if name == "flow":
            sp.add_argument("--dt", type=float, default=0.05)
            sp.add_argument("--steps", type=int, default=200)
        if name == "energy":
            sp.add_argument("--continuum", action="store_true", help="also evaluate the continuum functional")
        if name == "poisson":
            sp.add_argument("--m", type=int, help="Galerkin resolution (defaults to --n)")
    return parser


def load_scenario(path, args=None) -> Scenario:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("scenario must be a JSON object")
    if args is not None:
        if args.seed is not None:
            obj["seed"] = args.seed
        if args.out is not None:
            obj["output_dir"] = args.out
    return Scenario.from_json(obj, base=path.parent)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        sc = load_scenario(args.scenario, args)
        if args.n is not None and args.n < 2:
            raise UsageError("--n must be >= 2")
        return COMMANDS[args.command](sc, args)
    except UsageError as exc:
        print(f"graphonflux: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AssumptionViolation, SingularSystemError, IncompatibleDataError) as exc:
        print(f"graphonflux: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except GraphonFluxError as exc:
        print(f"graphonflux: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

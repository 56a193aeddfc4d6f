"""Semi-discrete and continuum energies, the nonlocal Poisson equation and convergence sweeps.

The continuum problem is discretized by Galerkin projection onto step
functions: at resolution m the Poisson equation becomes a Kirchhoff system
on the complete graph with conductances ``m^2 int_{cell} b w``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import sparse
from scipy.sparse import csgraph

from .graphon import (
    Kernel,
    PixelFunction,
    lift_matrix,
    project,
    sample_graph_from_graphon,
)
from .kirchhoff import solve_kirchhoff
from .model import (
    AssumptionViolation,
    GraphInstance,
    GraphonFluxError,
    ModelParams,
    SingularSystemError,
    SourceDensity,
    connectivity_constant,
    laplacian,
    sources_from_density,
    weighted_connectivity_constant,
)
from .optimizer import GridSpec, OptimizerOptions, brute_force_minimize, minimize_discrete


@dataclass
class FunctionalValue:
    kinetic: float
    metabolic: float
    resolution: int
    error_indicator: float = 0.0
    converged: bool = True
    trace: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.kinetic + self.metabolic

    def to_json(self) -> dict:
        return {
            "kinetic": self.kinetic,
            "metabolic": self.metabolic,
            "total": self.total,
            "resolution": self.resolution,
            "error_indicator": self.error_indicator,
            "converged": self.converged,
            "trace": self.trace,
        }


class EnergyIdentityError(RuntimeError):
    """Kinetic energy and source work disagree."""


# --------------------------------------------------------------------------- semi-discrete

def _bordered_pressure(weights: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Zero-mean solution of ``(1/n^2) Lap(weights) p = S`` via a Lagrange-multiplier system."""
    n = S.size
    ncomp, _ = csgraph.connected_components(sparse.csr_matrix(weights > 0), directed=False)
    if ncomp > 1:
        raise SingularSystemError(f"pixel graph has {ncomp} components")
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = laplacian(weights) / n**2
    M[:n, n] = 1.0
    M[n, :n] = 1.0
    sol = np.linalg.solve(M, np.append(S, 0.0))
    return sol[:n]


def _cell_power_average(b, n: int, p: float) -> np.ndarray:
    if isinstance(b, PixelFunction):
        return project(PixelFunction(b.values**p), n).values
    return b.power(p).cell_averages(n)


def semi_discrete_energy(b, w_pixel: PixelFunction, l_pixel: PixelFunction, sigma: SourceDensity,
                         params: ModelParams, n: int, return_pressure: bool = False,
                         identity_rtol: float = 1e-8):
    """Semi-discrete functional with the piecewise-constant pressure of the approximate Poisson problem.

    By the Z^N-invariance of the kinetic part the pressure only depends on
    the cell averages of ``b``; the reduced Kirchhoff system is solved through a
    bordered (Lagrange multiplier) system, independently of
    :func:`graphonflux.kirchhoff.solve_kirchhoff`.
    """
    if w_pixel.n != n or l_pixel.n != n:
        raise GraphonFluxError("pixel resolutions must equal n")
    W = w_pixel.values
    if not np.all((W == 0) | (W == 1)):
        raise GraphonFluxError("w_pixel must be 0-1 valued")
    Zb = project(b, n).values if isinstance(b, PixelFunction) else b.cell_averages(n)
    on = W == 1
    if isinstance(b, Kernel):
        if b.lower_bound < params.r:
            raise GraphonFluxError(f"kernel lower bound {b.lower_bound} is below r = {params.r}")
    elif np.any(Zb[on] < params.r):
        raise GraphonFluxError("conductivity below the floor r on an edge cell")
    S = sources_from_density(sigma, n)
    weights = W * Zb
    P = _bordered_pressure(weights, S)
    dP = P[:, None] - P[None, :]
    kin = float(np.sum(weights * dP**2) / (2 * n**2))
    work = float(np.dot(S, P))
    if abs(kin - work) > identity_rtol * max(abs(kin), 1e-300) and abs(kin - work) > 1e-14:
        raise EnergyIdentityError(f"kinetic {kin!r} vs source work {work!r}")
    g = params.gamma
    Lg = l_pixel.values ** (g + 1)
    bg = _cell_power_average(b, n, g)
    met = float((params.nu / (2 * g)) * np.sum(np.where(on, bg * Lg, 0.0)) / n**2)
    out = FunctionalValue(kin, met, n)
    return (out, PixelFunction(P)) if return_pressure else out


# --------------------------------------------------------------------------- continuum

@dataclass
class PoissonDiagnostics:
    resolution: int
    coercivity: float
    pressure_norm: float
    apriori_bound: float
    bound_ok: bool
    residual_norm: float
    kinetic: float
    source_work: float
    method: str
    lambda_hint: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def galerkin_conductance(b: Kernel, w: Kernel, m: int) -> np.ndarray:
    """``m^2 int_{cell} b w`` on the m x m grid."""
    return Kernel.product(b, w).cell_averages(m)


def continuum_poisson_solve(b: Kernel, w: Kernel, sigma: SourceDensity, m: int,
                            lambda_hint: float | None = None, r: float | None = None,
                            compute_coercivity: bool = True, bound_rtol: float = 1e-10):
    """Galerkin solution of the nonlocal Poisson equation on step functions at resolution ``m``.

    Returns the zero-mean pressure as a 1-D PixelFunction together with
    diagnostics, including the a-priori bound ``||p|| <= 2 ||sigma|| / (lam r)``
    with ``lam`` the coercivity constant of ``w`` on step functions at this
    resolution.
    """
    r = b.lower_bound if r is None else r
    if not r > 0:
        raise GraphonFluxError("conductivity kernel needs a positive lower bound r")
    if b.lower_bound < r:
        raise GraphonFluxError(f"kernel lower bound {b.lower_bound} is below r = {r}")
    K = galerkin_conductance(b, w, m)
    S = sigma.cell_integrals(m)
    lam = math.nan
    if compute_coercivity:
        lam = weighted_connectivity_constant(w.cell_averages(m))
        if lam <= 1e-12:
            raise SingularSystemError(f"coercivity fails at resolution {m}: lambda = {lam:.3e}")
    graph = GraphInstance.complete(m)
    P, report = solve_kirchhoff(graph, K, S)
    dP = P[:, None] - P[None, :]
    Koff = K.copy()
    np.fill_diagonal(Koff, 0.0)
    kin = float(np.sum(Koff * dP**2) / (2 * m**2))
    work = float(np.dot(S, P))
    p = PixelFunction(P)
    bound = 2 * sigma.l2_norm() / (lam * r) if compute_coercivity else math.inf
    diag = PoissonDiagnostics(
        resolution=m,
        coercivity=lam,
        pressure_norm=p.l2_norm(),
        apriori_bound=bound,
        bound_ok=bool(p.l2_norm() <= bound * (1 + bound_rtol)),
        residual_norm=report.residual_norm,
        kinetic=kin,
        source_work=work,
        method=report.method,
        lambda_hint=lambda_hint,
    )
    return p, diag


def metabolic_integral(b: Kernel, w: Kernel, l: Kernel, params: ModelParams) -> float:
    """``nu/(2 gamma) int b^gamma l^(gamma+1) dw`` by exact averages or refined midpoint quadrature."""
    g = params.gamma
    integrand = Kernel.product(b.power(g), l.power(g + 1), w)
    return float((params.nu / (2 * g)) * integrand.cell_averages(1)[0, 0])


def continuum_energy(b: Kernel, w: Kernel, l: Kernel, sigma: SourceDensity, params: ModelParams,
                     base_resolution: int = 8, rtol: float = 1e-4, cap: int = 1024,
                     identity_rtol: float = 1e-8) -> FunctionalValue:
    """Continuum functional by Galerkin refinement at m, 2m, 4m, ... until the relative change is below ``rtol``."""
    met = metabolic_integral(b, w, l, params)
    trace = []
    prev = None
    m = base_resolution
    change = math.inf
    while True:
        _, d = continuum_poisson_solve(b, w, sigma, m, r=params.r, compute_coercivity=False)
        if abs(d.kinetic - d.source_work) > identity_rtol * max(abs(d.kinetic), 1e-300) and \
                abs(d.kinetic - d.source_work) > 1e-14:
            raise EnergyIdentityError(f"kinetic {d.kinetic!r} vs source work {d.source_work!r} at m={m}")
        total = d.kinetic + met
        trace.append([m, total])
        if prev is not None:
            change = abs(total - prev) / max(abs(total), 1e-300)
            if change <= rtol:
                return FunctionalValue(d.kinetic, met, m, change, True, trace)
        if 2 * m > cap:
            return FunctionalValue(d.kinetic, met, m, change, False, trace)
        prev = total
        m *= 2


# --------------------------------------------------------------------------- moments

class LegendreBank:
    """Symmetrized tensor shifted-Legendre test functions ``phi_k(x) phi_l(y)``, k <= l <= degree."""

    def __init__(self, degree: int = 3):
        self.degree = degree
        self.pairs = [(k, l) for k in range(degree + 1) for l in range(k, degree + 1)]
        self._antider = [legendre.Legendre.basis(k, domain=[0, 1]).integ() for k in range(degree + 1)]

    def __len__(self):
        return len(self.pairs)

    def cell_integrals(self, n: int) -> np.ndarray:
        t = np.arange(n + 1) / n
        return np.array([np.diff(F(t)) for F in self._antider])

    def moments(self, B) -> np.ndarray:
        """``int int Q^N[B] phi_kl`` for all pairs, exact for step functions."""
        B = np.asarray(B, dtype=float)
        A = self.cell_integrals(B.shape[0])
        M = A @ B @ A.T
        return np.array([0.5 * (M[k, l] + M[l, k]) for k, l in self.pairs])


# --------------------------------------------------------------------------- sweeps

@dataclass
class SweepRow:
    n: int
    energy: FunctionalValue
    moments: np.ndarray
    wallclock: float
    info: dict = field(default_factory=dict)


@dataclass
class SweepResult:
    rows: list
    reference: FunctionalValue | None = None
    mode: str = "gamma"

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def ns(self) -> list:
        return [row.n for row in self.rows]

    def totals(self) -> np.ndarray:
        return np.array([row.energy.total for row in self.rows])

    def write_csv(self, path) -> None:
        k = len(self.rows[0].moments) if self.rows else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "kinetic", "metabolic", "total", "err_indicator",
                        *[f"moment_{i + 1}" for i in range(k)], "wallclock_ms"])
            for row in self.rows:
                e = row.energy
                w.writerow([row.n, *(f"{v:.17g}" for v in (e.kinetic, e.metabolic, e.total, e.error_indicator)),
                            *(f"{v:.17g}" for v in row.moments), f"{1000 * row.wallclock:.3f}"])


def _run_rows(fn, n_list, jobs: int) -> list:
    n_list = list(n_list)
    if list(n_list) != sorted(set(n_list)):
        raise GraphonFluxError("n_list must be strictly increasing")
    if jobs <= 1:
        return [fn(n) for n in n_list]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, n_list))  # map preserves n-order


def gamma_limsup_sweep(b: Kernel, w: Kernel, l: Kernel, sigma: SourceDensity, params: ModelParams,
                       n_list, moment_bank: LegendreBank | None = None, length_floor: float = 0.0,
                       reference: bool = True, jobs: int = 1, **continuum_kw) -> SweepResult:
    """Recovery-sequence sweep: semi-discrete energies of ``Z^N[b]`` on sampled graphs."""
    bank = moment_bank or LegendreBank()

    def row(n):
        t0 = time.perf_counter()
        g = sample_graph_from_graphon(w, l, n, floor=length_floor)
        bN = project(b, n)
        e = semi_discrete_energy(bN, lift_matrix(g.adjacency), lift_matrix(g.lengths), sigma, params, n)
        return SweepRow(n, e, bank.moments(bN.values), time.perf_counter() - t0)

    rows = _run_rows(row, n_list, jobs)
    ref = continuum_energy(b, w, l, sigma, params, **continuum_kw) if reference else None
    return SweepResult(rows, ref, "gamma")


def minimizer_sweep(w: Kernel, l, sigma: SourceDensity, params: ModelParams, n_list,
                    moment_bank: LegendreBank | None = None, opts: OptimizerOptions | None = None,
                    length_floor: float = 0.0, brute_force_edges: int = 3, grid: GridSpec | None = None,
                    jobs: int = 1) -> SweepResult:
    """Discrete global minimizers per N with energies and Legendre moments.

    Each sampled graph must satisfy the connectivity assumption with
    ``params.lam``; otherwise :class:`AssumptionViolation` is raised. Rows
    whose graph has at most ``brute_force_edges`` edges carry a grid-oracle
    energy in ``info['brute_force_energy']``.

    ``l`` may be a Kernel or a callable ``n -> N x N length matrix``.
    """
    bank = moment_bank or LegendreBank()

    def row(n):
        t0 = time.perf_counter()
        lengths = l if isinstance(l, Kernel) else l(n)
        g = sample_graph_from_graphon(w, lengths, n, floor=length_floor)
        lam_hat = connectivity_constant(g)
        if lam_hat < params.lam:
            raise AssumptionViolation(
                f"n={n}: connectivity constant {lam_hat:.6g} < lambda = {params.lam:.6g}")
        S = sources_from_density(sigma, n)
        B, rep = minimize_discrete(g, S, params, opts)
        e = rep.final_energy
        info = {"connectivity": lam_hat, "iterations": rep.iterations, "converged": rep.converged,
                "projected_grad_norm": rep.projected_grad_norm, "floor_active_edges": rep.floor_active_edges}
        if g.num_edges <= brute_force_edges:
            _, F_bf = brute_force_minimize(g, S, params, grid)
            info["brute_force_energy"] = F_bf
        return SweepRow(n, FunctionalValue(e.kinetic, e.metabolic, n), bank.moments(B),
                        time.perf_counter() - t0, info)

    return SweepResult(_run_rows(row, n_list, jobs), None, "minimizer")


# --------------------------------------------------------------------------- verdicts

def _doubling_pairs(ns):
    idx = {n: i for i, n in enumerate(ns)}
    return [(n, idx[n], idx[2 * n]) for n in ns if 2 * n in idx]


def error_trend(ns, errors, n_min: int = 8, ratio_max: float = 0.6, final_max: float | None = None) -> dict:
    """Doubling ratios ``e_2n / e_n`` for n >= n_min plus a fitted power-law rate."""
    ns = list(ns)
    errors = np.asarray(errors, dtype=float)
    if len(ns) < 2:
        return {"verdict": "insufficient points", "ratios": {}}
    ratios = {n: float(errors[j] / errors[i]) if errors[i] > 0 else 0.0
              for n, i, j in _doubling_pairs(ns) if n >= n_min}
    pos = errors > 0
    rate = float(-np.polyfit(np.log(np.array(ns)[pos]), np.log(errors[pos]), 1)[0]) if pos.sum() >= 2 else math.nan
    ok = bool(ratios) and all(v <= ratio_max for v in ratios.values())
    if final_max is not None:
        ok = ok and float(errors[-1]) <= final_max
    if not ratios:
        return {"verdict": "insufficient points", "ratios": ratios, "rate": rate}
    return {"verdict": "pass" if ok else "fail", "ratios": ratios, "rate": rate,
            "errors": dict(zip(ns, map(float, errors)))}


def cauchy_differences(ns, values) -> dict:
    """``|v(2n) - v(n)|`` keyed by n."""
    values = np.asarray(values, dtype=float)
    return {n: float(np.abs(values[j] - values[i])) for n, i, j in _doubling_pairs(list(ns))}


def contraction_trend(ns, values, n_min: int = 16, shrink: float = 0.75, atol: float = 1e-9) -> dict:
    """Successive Cauchy differences must shrink by the factor ``shrink`` per doubling for n >= n_min.

    Differences at or below ``atol`` count as converged (this covers moments
    that vanish by symmetry and only carry round-off).
    """
    diffs = cauchy_differences(ns, values)
    keys = [n for n in sorted(diffs) if n >= n_min and 2 * n in diffs]
    if not keys:
        return {"verdict": "insufficient points", "diffs": diffs, "factors": {}}
    factors, ok = {}, True
    for n in keys:
        d0, d1 = diffs[n], diffs[2 * n]
        if d1 <= atol:
            factors[n] = 0.0
            continue
        factors[n] = d1 / d0 if d0 > 0 else math.inf
        ok = ok and factors[n] <= shrink
    return {"verdict": "pass" if ok else "fail", "diffs": diffs, "factors": factors}


def strictly_decreasing_trend(ns, values, n_min: int = 8) -> dict:
    diffs = cauchy_differences(ns, values)
    keys = [n for n in sorted(diffs) if n >= n_min]
    if len(keys) < 2:
        return {"verdict": "insufficient points", "diffs": diffs}
    seq = [diffs[n] for n in keys]
    ok = all(b < a for a, b in zip(seq, seq[1:]))
    return {"verdict": "pass" if ok else "fail", "diffs": diffs}


def gamma_verdict(result: SweepResult, reference_value: float | None = None, n_min: int = 8,
                  ratio_max: float = 0.6, final_max: float | None = None, cauchy_n_min: int = 16,
                  cauchy_shrink: float = 0.75) -> dict:
    """Error-ratio verdict against a reference value, or a Cauchy self-convergence verdict without one."""
    ns, totals = result.ns(), result.totals()
    if len(ns) < 2:
        return {"verdict": "insufficient points"}
    if reference_value is None and result.reference is not None and result.reference.converged:
        reference_value = result.reference.total
    if reference_value is not None:
        out = error_trend(ns, np.abs(totals - reference_value), n_min, ratio_max, final_max)
        out["reference"] = reference_value
        out["criterion"] = "error ratio"
        return out
    out = contraction_trend(ns, totals, cauchy_n_min, cauchy_shrink)
    out["criterion"] = "cauchy"
    return out


def minimizer_verdict(result: SweepResult, energy_n_min: int = 8, moment_n_min: int = 16,
                      shrink: float = 0.75, atol: float = 1e-9, oracle_tol: float = 1e-3) -> dict:
    ns = result.ns()
    if len(ns) < 2:
        return {"verdict": "insufficient points"}
    energy = strictly_decreasing_trend(ns, result.totals(), energy_n_min)
    M = np.array([row.moments for row in result.rows])
    moments = [contraction_trend(ns, M[:, k], moment_n_min, shrink, atol) for k in range(M.shape[1])]
    oracle = {row.n: abs(row.info["brute_force_energy"] - row.energy.total)
              for row in result.rows if "brute_force_energy" in row.info}
    oracle_ok = all(v <= oracle_tol for v in oracle.values())
    parts = [energy["verdict"]] + [m["verdict"] for m in moments]
    if "fail" in parts or not oracle_ok:
        verdict = "fail"
    elif all(p == "pass" for p in parts):
        verdict = "pass"
    else:
        verdict = "insufficient points"
    return {"verdict": verdict, "energy": energy, "moments": moments, "oracle_gaps": oracle}


def run_id(payload: dict) -> str:
    """Deterministic short hash of a JSON-serializable run description."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


__all__ = [
    "FunctionalValue", "SweepRow", "SweepResult", "LegendreBank", "PoissonDiagnostics",
    "semi_discrete_energy", "continuum_poisson_solve", "continuum_energy", "metabolic_integral",
    "gamma_limsup_sweep", "minimizer_sweep", "gamma_verdict", "minimizer_verdict",
    "error_trend", "contraction_trend", "strictly_decreasing_trend", "cauchy_differences", "run_id",
]

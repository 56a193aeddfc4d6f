"""Minimization of the rescaled energy over the conductivity constraint set.

All iterates live in the edge space: one value per unordered edge, mirrored
into a symmetric matrix when the energy is evaluated.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .energy import EnergyBreakdown, discrete_energy, energy_gradient, kinetic_energy, metabolic_energy
from .kirchhoff import solve_kirchhoff
from .model import GraphInstance, GraphonFluxError, ModelParams, is_feasible


@dataclass(frozen=True)
class OptimizerOptions:
    max_iters: int = 20000
    grad_tol: float = 1e-8
    step_init: float = 1.0
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.max_iters <= 0 or self.grad_tol <= 0 or self.step_init <= 0:
            raise GraphonFluxError("optimizer options must be positive")
        if not (0 < self.armijo_c < 1 and 0 < self.backtrack_factor < 1):
            raise GraphonFluxError("armijo_c and backtrack_factor must lie in (0, 1)")


@dataclass
class MinimizeReport:
    iterations: int
    final_energy: EnergyBreakdown
    projected_grad_norm: float
    floor_active_edges: int
    converged: bool
    message: str = ""

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_energy": self.final_energy.to_json(),
            "projected_grad_norm": self.projected_grad_norm,
            "floor_active_edges": self.floor_active_edges,
            "converged": self.converged,
            "message": self.message,
        }


class _EdgeProblem:
    """Energy and gradient as functions of the edge vector."""

    def __init__(self, graph: GraphInstance, S, params: ModelParams):
        self.graph = graph
        self.S = np.asarray(S, dtype=float)
        self.params = params
        self.iu, self.ju = graph.edges

    def to_matrix(self, x: np.ndarray) -> np.ndarray:
        B = np.zeros((self.graph.n, self.graph.n))
        B[self.iu, self.ju] = x
        B[self.ju, self.iu] = x
        return B

    def to_edges(self, B) -> np.ndarray:
        return np.asarray(B, dtype=float)[self.iu, self.ju]

    def evaluate(self, x: np.ndarray):
        B = self.to_matrix(x)
        P, _ = solve_kirchhoff(self.graph, B, self.S)
        kin = kinetic_energy(self.graph, B, P)
        met = metabolic_energy(self.graph, B, self.params)
        G = energy_gradient(self.graph, B, self.S, self.params, P=P)
        return kin + met, G[self.iu, self.ju], EnergyBreakdown(kin, met)


def _projected_gradient(x, g, r):
    """Natural residual ``x - max(x - g, r)``; zero exactly at KKT points."""
    return x - np.maximum(x - g, r)


def default_start(graph: GraphInstance, params: ModelParams) -> np.ndarray:
    b0 = max(params.r, params.nu ** (-1.0 / (params.gamma + 1)))
    return np.where(graph.adjacency == 1, b0, 0.0)


def _polish(prob, x, F, g, parts, pg_norm, r, tol, n2, max_steps=200):
    """Projected Barzilai-Borwein steps accepted on residual decrease.

    Energy differences near the optimum drown in round-off long before the
    gradient does, so the energy is only required not to rise beyond
    round-off here.
    """
    alpha = float(n2)
    for _ in range(max_steps):
        if pg_norm <= tol:
            break
        x_new = np.maximum(x - alpha * g, r)
        F_new, g_new, parts_new = prob.evaluate(x_new)
        pg_new = float(np.linalg.norm(_projected_gradient(x_new, g_new, r)))
        if pg_new < pg_norm and F_new <= F + 1e-13 * abs(F):
            s, y = x_new - x, g_new - g
            sy = float(np.dot(s, y))
            alpha = float(np.dot(s, s) / sy) if sy > 0 else float(n2)
            x, F, g, parts, pg_norm = x_new, F_new, g_new, parts_new, pg_new
        else:
            alpha *= 0.5
    return x, F, g, parts, pg_norm


def minimize_discrete(graph: GraphInstance, S, params: ModelParams,
                      opts: OptimizerOptions | None = None, B0=None) -> tuple[np.ndarray, MinimizeReport]:
    """Global minimizer of ``F^N`` over the constraint set.

    Uses scipy's bound-constrained L-BFGS-B on the edge vector with the
    lower bound ``r`` (a projected quasi-Newton method with a monotone line
    search). The objective is scaled by ``N^2`` so gradient entries are
    O(1). Convergence is judged on the natural residual of the unscaled
    gradient; if the budget runs out the feasible last iterate is returned
    with ``converged=False``.
    """
    opts = opts or OptimizerOptions()
    r = params.r
    prob = _EdgeProblem(graph, S, params)
    n2 = graph.n**2
    x0 = prob.to_edges(default_start(graph, params) if B0 is None else B0)
    if x0.size == 0:
        raise GraphonFluxError("graph has no edges")
    x0 = np.maximum(x0, r)

    cache = {}

    def fun(x):
        F, g, parts = prob.evaluate(x)
        cache["last"] = (x.copy(), F, g, parts)
        return n2 * F, n2 * g

    res = optimize.minimize(
        fun, x0, jac=True, method="L-BFGS-B", bounds=[(r, None)] * x0.size,
        options={"maxiter": opts.max_iters, "maxfun": 20 * opts.max_iters,
                 "gtol": opts.grad_tol * n2 / 10, "ftol": 0.0, "maxcor": 20},
    )
    x = np.maximum(res.x, r)
    F, g, parts = prob.evaluate(x)
    pg_norm = float(np.linalg.norm(_projected_gradient(x, g, r)))
    x, F, g, parts, pg_norm = _polish(prob, x, F, g, parts, pg_norm, r, opts.grad_tol, n2)
    converged = pg_norm <= opts.grad_tol
    B = prob.to_matrix(x)
    report = MinimizeReport(
        iterations=int(res.nit),
        final_energy=parts,
        projected_grad_norm=pg_norm,
        floor_active_edges=int(np.count_nonzero(x == r)),
        converged=converged,
        message=("projected gradient below tolerance" if converged else
                 "max_iters reached" if res.nit >= opts.max_iters else str(res.message)),
    )
    return B, report


@dataclass
class FlowTrajectory:
    states: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    dts: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    def write_csv(self, path, graph: GraphInstance) -> None:
        """Rows ``step, edge_id, B, energy`` with 1-based edge ids in upper-triangle order."""
        iu, ju = graph.edges
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "edge_id", "i", "j", "B", "energy"])
            for step, (B, E) in enumerate(zip(self.states, self.energies)):
                for e, (i, j) in enumerate(zip(iu, ju)):
                    w.writerow([step, e + 1, i + 1, j + 1, f"{B[i, j]:.17g}", f"{E:.17g}"])


def gradient_flow_integrate(graph: GraphInstance, B0, S, params: ModelParams, dt: float, steps: int,
                            monitor: bool = True, max_halvings: int = 50) -> FlowTrajectory:
    """Explicit Euler for ``dB/dt = (P_i - P_j)^2 - nu B^(gamma-1) L^(gamma+1)`` with a floor at r.

    With ``monitor`` on, a step that would raise the energy is retried with
    half the time step.
    """
    if dt <= 0:
        raise GraphonFluxError("dt must be positive")
    r = params.r
    W = graph.adjacency
    B = np.where(W == 1, np.maximum(np.asarray(B0, dtype=float), r), 0.0)
    E, P = discrete_energy(graph, B, S, params, return_pressure=True)
    traj = FlowTrajectory([B.copy()], [E.total], [])
    h = dt
    for _ in range(steps):
        G = energy_gradient(graph, B, S, params, P=P)
        for _ in range(max_halvings + 1):
            B_new = np.where(W == 1, np.maximum(B - h * graph.n**2 * G, r), 0.0)
            E_new, P_new = discrete_energy(graph, B_new, S, params, return_pressure=True)
            if not monitor or E_new.total <= E.total:
                break
            h *= 0.5
        B, E, P = B_new, E_new, P_new
        traj.states.append(B.copy())
        traj.energies.append(E.total)
        traj.dts.append(h)
    return traj


@dataclass(frozen=True)
class GridSpec:
    points: int = 41
    levels: int = 12
    b_max: float | None = None


def _batched_energy(graph: GraphInstance, S, params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Energies of many edge vectors at once (rows of ``X``)."""
    n = graph.n
    iu, ju = graph.edges
    L = graph.lengths[iu, ju]
    m = X.shape[0]
    A = np.zeros((m, n, n))
    for e, (i, j) in enumerate(zip(iu, ju)):
        A[:, i, j] -= X[:, e]
        A[:, j, i] -= X[:, e]
        A[:, i, i] += X[:, e]
        A[:, j, j] += X[:, e]
    A /= n**2
    S = np.asarray(S, dtype=float)
    P = np.zeros((m, n))
    P[:, 1:] = np.linalg.solve(A[:, 1:, 1:], np.broadcast_to(S[1:], (m, n - 1))[..., None])[..., 0]
    kin = P @ S
    g = params.gamma
    met = np.sum((params.nu / g) * X**g * L ** (g + 1), axis=1) / n**2
    return kin + met


def brute_force_minimize(graph: GraphInstance, S, params: ModelParams,
                         grid: GridSpec | None = None) -> tuple[np.ndarray, float]:
    """Exhaustive grid search over ``[r, b_max]^edges`` with zooming refinement.

    Only for graphs with at most three edges. The default ``b_max`` is the
    a-priori bound from ``F(B*) <= F(r)``: every edge of the minimizer has
    ``nu/gamma B^gamma L^(gamma+1) / N^2 <= F(r)``.
    """
    grid = grid or GridSpec()
    iu, ju = graph.edges
    k = iu.size
    if k > 3:
        raise GraphonFluxError(f"brute force is limited to 3 edges, graph has {k}")
    if k == 0:
        raise GraphonFluxError("graph has no edges")
    r = params.r
    L = graph.lengths[iu, ju]
    if grid.b_max is None:
        F_floor = _batched_energy(graph, S, params, np.full((1, k), r))[0]
        g = params.gamma
        b_max = np.max((g * graph.n**2 * F_floor / (params.nu * L ** (g + 1))) ** (1 / g))
        b_max = max(float(b_max), r * (1 + 1e-9))
    else:
        b_max = grid.b_max
    lo, hi = np.full(k, r), np.full(k, b_max)
    best, best_F = None, np.inf
    for _ in range(grid.levels):
        axes = [np.linspace(lo[e], hi[e], grid.points) for e in range(k)]
        X = np.array(list(itertools.product(*axes)))
        F = _batched_energy(graph, S, params, X)
        i = int(np.argmin(F))
        if F[i] < best_F:
            best, best_F = X[i], float(F[i])
        h = (hi - lo) / (grid.points - 1)
        lo = np.maximum(best - 2 * h, r)
        hi = np.minimum(best + 2 * h, b_max)
    B = np.zeros((graph.n, graph.n))
    B[iu, ju] = best
    B[ju, iu] = best
    assert is_feasible(B, graph, r)
    return B, best_F

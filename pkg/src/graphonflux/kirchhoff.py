"""Rescaled Kirchhoff law on the zero-mean subspace.

The system is

    -(1/N^2) sum_j W_ij B_ij (P_j - P_i) = S_i,

i.e. ``(1/N^2) Lap(W * B) P = S`` with a weighted graph Laplacian. It is
singular (constants are in the kernel); the canonical solution is the
zero-mean one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .model import (
    GraphInstance,
    IncompatibleDataError,
    ModelParams,
    SingularSystemError,
    check_mass_conservation,
    laplacian,
)

DENSE_MAX = 256
DEFAULT_TOL = 1e-10


@dataclass
class SolveReport:
    iterations: int
    residual_norm: float
    method: str  # "dense" or "conjugate-gradient"

    def to_json(self) -> dict:
        return asdict(self)


def kirchhoff_operator(graph: GraphInstance, B) -> np.ndarray:
    """Dense matrix ``A`` with ``A @ P`` equal to the left-hand side of the law."""
    n = graph.n
    return laplacian(graph.adjacency * np.asarray(B, dtype=float)) / n**2


def kirchhoff_residual(graph: GraphInstance, B, P, S) -> np.ndarray:
    return kirchhoff_operator(graph, B) @ np.asarray(P, dtype=float) - np.asarray(S, dtype=float)


def _check_connected(weights: np.ndarray) -> None:
    ncomp, _ = csgraph.connected_components(sparse.csr_matrix(weights > 0), directed=False)
    if ncomp > 1:
        raise SingularSystemError(f"conductivity graph has {ncomp} components")


def _dense_solve(A: np.ndarray, S: np.ndarray) -> np.ndarray:
    # pin node 1 to zero, then recenter
    P = np.zeros_like(S)
    P[1:] = np.linalg.solve(A[1:, 1:], S[1:])
    return P - P.mean()


def _pcg(A: np.ndarray, S: np.ndarray, tol: float, maxiter: int, x0=None) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned CG on the consistent singular system ``A x = S``."""
    d = np.diag(A).copy()
    d[d <= 0] = 1.0
    x = np.zeros_like(S) if x0 is None else np.asarray(x0, dtype=float) - np.mean(x0)
    r = S - A @ x
    target = tol * np.linalg.norm(S)
    z = r / d
    p = z.copy()
    rz = r @ z
    it = 0
    while np.linalg.norm(r) > target and it < maxiter:
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = r / d
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    return x - x.mean(), it


def solve_kirchhoff(graph: GraphInstance, B, S, tol: float = DEFAULT_TOL, method: str = "auto",
                    x0=None, maxiter: int | None = None) -> tuple[np.ndarray, SolveReport]:
    """Zero-mean pressures for conductivities ``B`` and balanced sources ``S``.

    Parameters
    ----------
    graph : GraphInstance
    B : (N, N) array
        Symmetric conductivities; only entries on edges are read.
    S : (N,) array
        Sources summing to zero.
    tol : float
        Relative residual tolerance, ``||A P - S|| <= tol ||S||``.
    method : {"auto", "dense", "conjugate-gradient"}
        ``auto`` picks the dense path for N <= 256.

    Raises
    ------
    IncompatibleDataError
        If ``S`` does not sum to zero.
    SingularSystemError
        If the graph restricted to positive conductivities is disconnected.
    """
    S = np.asarray(S, dtype=float)
    n = graph.n
    if S.shape != (n,):
        raise IncompatibleDataError(f"source vector has shape {S.shape}, expected ({n},)")
    if not check_mass_conservation(S):
        raise IncompatibleDataError(f"sources sum to {S.sum():.3e}, expected 0")
    weights = graph.adjacency * np.asarray(B, dtype=float)
    _check_connected(weights)
    A = laplacian(weights) / n**2
    if method == "auto":
        method = "dense" if n <= DENSE_MAX else "conjugate-gradient"
    if not np.any(S):
        P, iters = np.zeros(n), 0
    elif method == "dense":
        P, iters = _dense_solve(A, S), 1
    elif method == "conjugate-gradient":
        P, iters = _pcg(A, S, tol, maxiter or 10 * n, x0=x0)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = float(np.linalg.norm(A @ P - S))
    if res > tol * np.linalg.norm(S) and np.any(S):
        raise SingularSystemError(f"solve did not reach tolerance: residual {res:.3e}")
    return P, SolveReport(iterations=iters, residual_norm=res, method=method)


def weak_form_residual(graph: GraphInstance, B, P, S, Phi) -> float:
    """Signed defect of the weak form tested with the zero-mean vector ``Phi``."""
    P = np.asarray(P, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    n = graph.n
    WB = graph.adjacency * np.asarray(B, dtype=float)
    dP = P[None, :] - P[:, None]
    dPhi = Phi[None, :] - Phi[:, None]
    return float(np.sum(WB * dP * dPhi) / (2 * n**2) - np.dot(S, Phi))


def kirchhoff_estimate_sides(graph: GraphInstance, params: ModelParams, P, sigma_l2: float,
                             lam: float | None = None) -> tuple[float, float]:
    """Both sides of ``sum_ij (P_i - P_j)^2 <= 8 N^2 / (r lam)^2 * int sigma^2``."""
    P = np.asarray(P, dtype=float)
    n = graph.n
    lam = params.lam if lam is None else lam
    lhs = float(2 * n * np.sum(P**2) - 2 * np.sum(P) ** 2)
    rhs = 8 * n**2 / (params.r * lam) ** 2 * sigma_l2
    return lhs, rhs


def verify_kirchhoff_estimate(graph: GraphInstance, params: ModelParams, S, P, sigma_l2: float,
                              lam: float | None = None, rtol: float = 1e-10) -> bool:
    # the bound is attained on complete graphs with B = r, hence the round-off slack
    lhs, rhs = kirchhoff_estimate_sides(graph, params, P, sigma_l2, lam)
    return lhs <= rhs * (1 + rtol) + 1e-300

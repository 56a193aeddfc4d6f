"""Original and rescaled network energies, flows and the energy gradient."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .kirchhoff import DEFAULT_TOL, solve_kirchhoff
from .model import DegenerateLengthError, GraphInstance, ModelParams, MASS_TOL, laplacian


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    metabolic: float

    @property
    def total(self) -> float:
        return self.kinetic + self.metabolic

    def to_json(self) -> dict:
        return {"kinetic": self.kinetic, "metabolic": self.metabolic, "total": self.total}


class SolverDriftError(RuntimeError):
    """The two kinetic-energy evaluations disagree beyond tolerance."""


def metabolic_energy(graph: GraphInstance, B, params: ModelParams) -> float:
    W, L = graph.adjacency, graph.lengths
    B = np.asarray(B, dtype=float)
    on = W == 1
    g = params.gamma
    return float(np.sum((params.nu / g) * B[on] ** g * L[on] ** (g + 1)) / (2 * graph.n**2))


def kinetic_energy(graph: GraphInstance, B, P) -> float:
    P = np.asarray(P, dtype=float)
    dP = P[None, :] - P[:, None]
    return float(np.sum(graph.adjacency * np.asarray(B, dtype=float) * dP**2) / (2 * graph.n**2))


def discrete_energy(graph: GraphInstance, B, S, params: ModelParams, tol: float = DEFAULT_TOL,
                    drift_rtol: float = 1e-8, return_pressure: bool = False):
    """Rescaled energy ``F^N[B]`` split into kinetic and metabolic parts.

    The kinetic part is evaluated as the bilinear sum and cross-checked
    against ``sum_i S_i P_i``.
    """
    P, _ = solve_kirchhoff(graph, B, S, tol=tol)
    kin = kinetic_energy(graph, B, P)
    kin_sp = float(np.dot(S, P))
    if abs(kin - kin_sp) > drift_rtol * max(abs(kin), 1e-300) and abs(kin - kin_sp) > 1e-14:
        raise SolverDriftError(f"kinetic energy {kin!r} vs S.P {kin_sp!r}")
    out = EnergyBreakdown(kin, metabolic_energy(graph, B, params))
    return (out, P) if return_pressure else out


def original_energy(graph: GraphInstance, C, S, params: ModelParams) -> float:
    """Unscaled energy ``E[C]`` with pressures from the unscaled Kirchhoff law.

    Returns ``math.inf`` when the law has no solution, i.e. when some
    connected component of the positive-conductivity subgraph carries a
    nonzero net source.
    """
    C = np.asarray(C, dtype=float)
    S = np.asarray(S, dtype=float)
    W, L = graph.adjacency, graph.lengths
    on = W == 1
    if np.any(L[on] == 0):
        raise DegenerateLengthError("edge with zero length")
    cond = np.zeros_like(C)
    cond[on] = C[on] / L[on]
    ncomp, labels = csgraph.connected_components(sparse.csr_matrix(cond > 0), directed=False)
    P = np.zeros(graph.n)
    tol = MASS_TOL * graph.n * max(1.0, np.max(np.abs(S), initial=0.0))
    for c in range(ncomp):
        idx = np.flatnonzero(labels == c)
        if abs(S[idx].sum()) > tol:
            return math.inf
        if idx.size > 1:
            A = laplacian(cond[np.ix_(idx, idx)])
            sub = np.zeros(idx.size)
            sub[1:] = np.linalg.solve(A[1:, 1:], S[idx][1:])
            P[idx] = sub
    dP = P[None, :] - P[:, None]
    g = params.gamma
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(on, (C * dP**2 / np.where(on, L, 1.0) ** 2 + (params.nu / g) * C**g) * L, 0.0)
    return float(0.5 * np.sum(terms))


def compute_flows(graph: GraphInstance, C, P) -> np.ndarray:
    """Fluxes ``Q_ij = C_ij (P_j - P_i) / L_ij`` on edges (antisymmetric)."""
    W, L = graph.adjacency, graph.lengths
    on = W == 1
    if np.any(L[on] == 0):
        raise DegenerateLengthError("edge with zero length")
    P = np.asarray(P, dtype=float)
    C = np.asarray(C, dtype=float)
    dP = P[None, :] - P[:, None]
    Q = np.zeros_like(C)
    Q[on] = C[on] * dP[on] / L[on]
    # exact antisymmetry regardless of round-off in the upper/lower halves
    return 0.5 * (Q - Q.T)


def energy_gradient(graph: GraphInstance, B, S, params: ModelParams, P=None) -> np.ndarray:
    """Derivative of ``F^N`` w.r.t. each symmetric pair ``B_ij = B_ji``.

    ``G_ij = (W_ij / N^2) (nu B_ij^(gamma-1) L_ij^(gamma+1) - (P_i - P_j)^2)``;
    the descent direction is ``-G``.
    """
    if P is None:
        P, _ = solve_kirchhoff(graph, B, S)
    B = np.asarray(B, dtype=float)
    W, L = graph.adjacency, graph.lengths
    dP2 = (P[:, None] - P[None, :]) ** 2
    g = params.gamma
    with np.errstate(invalid="ignore"):
        G = np.where(W == 1, params.nu * np.abs(B) ** (g - 1) * L ** (g + 1) - dP2, 0.0)
    return G / graph.n**2

"""Graphs, sources, parameters and the structural checks used everywhere else.

Conductivity matrices, source vectors and pressure vectors are plain
``numpy`` arrays; the dataclasses here carry the few objects that need
validation at construction time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import csgraph
from scipy.sparse import linalg as sparse_linalg

#: relative scale of the zero-sum tolerance for source vectors
MASS_TOL = 1e-12
#: largest N for which the Fiedler value is computed by a dense eigensolver
DENSE_EIG_MAX = 512


class GraphonFluxError(ValueError):
    """Base class for rejected inputs."""


class DegenerateLengthError(GraphonFluxError):
    pass


class SingularSystemError(GraphonFluxError):
    pass


class IncompatibleDataError(GraphonFluxError):
    pass


class AssumptionViolation(GraphonFluxError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GraphInstance:
    """Undirected simple graph with 0/1 adjacency and rescaled edge lengths.

    ``lengths`` is a full N x N matrix. Entries where ``adjacency`` is zero are
    stored but never used by energy computations.
    """

    adjacency: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.adjacency, dtype=float)
        L = np.asarray(self.lengths, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] < 1:
            raise GraphonFluxError(f"adjacency must be square, got shape {W.shape}")
        if L.shape != W.shape:
            raise GraphonFluxError("lengths and adjacency shapes differ")
        if not np.all((W == 0) | (W == 1)):
            raise GraphonFluxError("adjacency entries must be 0 or 1")
        if not np.array_equal(W, W.T):
            raise GraphonFluxError("adjacency must be symmetric")
        if np.any(np.diag(W) != 0):
            raise GraphonFluxError("self-loops are not allowed")
        if not np.all(np.isfinite(L)) or np.any(L < 0):
            raise GraphonFluxError("lengths must be finite and nonnegative")
        if not np.array_equal(L, L.T):
            raise GraphonFluxError("lengths must be symmetric")
        if np.any(L > 1.0):
            raise GraphonFluxError("lengths must satisfy L_ij <= 1")
        if np.any(L[W == 1] <= 0):
            raise DegenerateLengthError("edge with zero length")
        object.__setattr__(self, "adjacency", _frozen(W))
        object.__setattr__(self, "lengths", _frozen(L))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays ``(i, j)`` of the edges with ``i < j``."""
        return np.nonzero(np.triu(self.adjacency, 1))

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def permuted(self, perm: Sequence[int]) -> "GraphInstance":
        perm = np.asarray(perm)
        return GraphInstance(self.adjacency[np.ix_(perm, perm)], self.lengths[np.ix_(perm, perm)])

    @classmethod
    def complete(cls, n: int, length: float = 1.0) -> "GraphInstance":
        W = np.ones((n, n)) - np.eye(n)
        return cls(W, np.full((n, n), float(length)))

    @classmethod
    def from_edges(cls, n: int, edges, default_length: float = 1.0) -> "GraphInstance":
        """Build from ``(i, j[, length])`` triples with 0-based indices."""
        W = np.zeros((n, n))
        L = np.full((n, n), float(default_length))
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise GraphonFluxError("self-loops are not allowed")
            W[i, j] = W[j, i] = 1
            if len(e) > 2:
                L[i, j] = L[j, i] = float(e[2])
        return cls(W, L)

    def to_json(self) -> dict:
        i, j = self.edges
        return {
            "n": self.n,
            "edges": [[int(a) + 1, int(b) + 1, float(self.lengths[a, b])] for a, b in zip(i, j)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GraphInstance":
        """Inverse of :meth:`to_json`; indices in the file are 1-based with i < j."""
        n = int(obj["n"])
        edges = []
        for e in obj["edges"]:
            i, j = int(e[0]), int(e[1])
            if not (1 <= i < j <= n):
                raise GraphonFluxError(f"bad edge {e!r}: need 1 <= i < j <= n")
            edges.append((i - 1, j - 1, *e[2:3]))
        return cls.from_edges(n, edges)


def load_graph(path) -> GraphInstance:
    return GraphInstance.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ModelParams:
    gamma: float = 2.0
    nu: float = 1.0
    r: float = 0.1
    lam: float = 1.0

    def __post_init__(self):
        if not self.gamma > 1:
            raise GraphonFluxError("gamma must be > 1")
        for name in ("nu", "r", "lam"):
            if not getattr(self, name) > 0:
                raise GraphonFluxError(f"{name} must be > 0")

    @property
    def omega(self) -> float:
        return max(2.0, self.gamma)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelParams":
        return cls(
            gamma=float(obj.get("gamma", 2.0)),
            nu=float(obj.get("nu", 1.0)),
            r=float(obj.get("r", 0.1)),
            lam=float(obj.get("lambda", obj.get("lam", 1.0))),
        )

    def to_json(self) -> dict:
        return {"gamma": self.gamma, "nu": self.nu, "r": self.r, "lambda": self.lam}


@dataclass(frozen=True)
class SourceDensity:
    """Zero-mean source/sink intensity on [0, 1].

    Built-in kinds have closed-form antiderivatives, so cell integrals
    telescope and the resulting source vectors sum to zero up to round-off:

    * ``cosine``: ``amplitude * cos(k pi x)``, k >= 1
    * ``dipole``: ``+strength/|A|`` on the source interval A and
      ``-strength/|B|`` on the sink interval B
    * ``grid``: constant on M uniform cells with the given values
    * ``zero``
    * ``callable``: arbitrary function, integrated with adaptive Gauss-Kronrod
    """

    kind: str
    params: dict = field(default_factory=dict)
    func: Callable | None = None
    quad_rtol: float = 1e-12

    def __post_init__(self):
        if self.kind not in ("cosine", "dipole", "grid", "zero", "callable"):
            raise GraphonFluxError(f"unknown density kind {self.kind!r}")
        if self.kind == "callable" and self.func is None:
            raise GraphonFluxError("callable density needs func")
        if self.kind == "cosine" and int(self.params.get("k", 1)) < 1:
            raise GraphonFluxError("cosine mode must have k >= 1")
        if self.kind == "grid":
            v = np.asarray(self.params["values"], dtype=float)
            if v.ndim != 1 or v.size == 0:
                raise GraphonFluxError("grid density needs a nonempty 1-D value list")
        mean = self.integral(0.0, 1.0)
        if abs(mean) > 1e-10 * max(1.0, self.l2_norm()):
            raise IncompatibleDataError(f"source density has nonzero mean {mean:.3e}")

    # constructors
    @classmethod
    def cosine(cls, k: int = 1, amplitude: float = 1.0) -> "SourceDensity":
        return cls("cosine", {"k": int(k), "amplitude": float(amplitude)})

    @classmethod
    def dipole(cls, source=(0.0, 0.25), sink=(0.75, 1.0), strength: float = 1.0) -> "SourceDensity":
        return cls("dipole", {"source": list(source), "sink": list(sink), "strength": float(strength)})

    @classmethod
    def grid(cls, values) -> "SourceDensity":
        return cls("grid", {"values": [float(v) for v in np.asarray(values, dtype=float)]})

    @classmethod
    def zero(cls) -> "SourceDensity":
        return cls("zero")

    @classmethod
    def from_callable(cls, f: Callable) -> "SourceDensity":
        return cls("callable", func=f)

    @classmethod
    def from_json(cls, obj: dict) -> "SourceDensity":
        obj = dict(obj)
        kind = obj.pop("kind")
        if kind == "cosine":
            return cls.cosine(obj.get("k", 1), obj.get("amplitude", 1.0))
        if kind == "dipole":
            return cls.dipole(obj.get("source", (0.0, 0.25)), obj.get("sink", (0.75, 1.0)),
                              obj.get("strength", 1.0))
        if kind == "grid":
            return cls.grid(obj["values"])
        if kind == "zero":
            return cls.zero()
        raise GraphonFluxError(f"unknown density kind {kind!r}")

    def to_json(self) -> dict:
        if self.kind == "callable":
            raise GraphonFluxError("callable densities are not serializable")
        return {"kind": self.kind, **self.params}

    # evaluation
    def _grid_values(self) -> np.ndarray:
        return np.asarray(self.params["values"], dtype=float)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "cosine":
            k, a = self.params["k"], self.params.get("amplitude", 1.0)
            return a * np.cos(k * np.pi * x)
        if self.kind == "dipole":
            (a0, a1), (b0, b1) = self.params["source"], self.params["sink"]
            s = self.params.get("strength", 1.0)
            return (s / (a1 - a0)) * ((x >= a0) & (x < a1)) - (s / (b1 - b0)) * ((x >= b0) & (x < b1))
        if self.kind == "grid":
            v = self._grid_values()
            idx = np.clip(np.floor(x * v.size).astype(int), 0, v.size - 1)
            return v[idx]
        return np.vectorize(self.func, otypes=[float])(x)

    def antiderivative(self, x):
        """``int_0^x sigma``; only for closed-form kinds."""
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "cosine":
            k, a = self.params["k"], self.params.get("amplitude", 1.0)
            return a * np.sin(k * np.pi * x) / (k * np.pi)
        if self.kind == "dipole":
            (a0, a1), (b0, b1) = self.params["source"], self.params["sink"]
            s = self.params.get("strength", 1.0)
            return (s / (a1 - a0)) * (np.clip(x, a0, a1) - a0) - (s / (b1 - b0)) * (np.clip(x, b0, b1) - b0)
        if self.kind == "grid":
            v = self._grid_values()
            knots = np.linspace(0.0, 1.0, v.size + 1)
            cum = np.concatenate([[0.0], np.cumsum(v) / v.size])
            return np.interp(x, knots, cum)
        raise GraphonFluxError("callable densities have no closed-form antiderivative")

    def integral(self, a: float, b: float) -> float:
        if self.kind == "callable":
            val, _ = integrate.quad(self.func, a, b, epsabs=1e-14, epsrel=self.quad_rtol, limit=200)
            return float(val)
        return float(self.antiderivative(b) - self.antiderivative(a))

    def cell_integrals(self, n: int) -> np.ndarray:
        edges = np.linspace(0.0, 1.0, n + 1)
        if self.kind == "callable":
            return np.array([self.integral(edges[i], edges[i + 1]) for i in range(n)])
        F = self.antiderivative(edges)
        return np.diff(F)

    def l2_norm_sq(self) -> float:
        """``int_0^1 sigma^2``."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "cosine":
            return 0.5 * self.params.get("amplitude", 1.0) ** 2
        if self.kind == "dipole":
            (a0, a1), (b0, b1) = self.params["source"], self.params["sink"]
            s = self.params.get("strength", 1.0)
            return s**2 / (a1 - a0) + s**2 / (b1 - b0)
        if self.kind == "grid":
            v = self._grid_values()
            return float(np.mean(v**2))
        val, _ = integrate.quad(lambda t: self.func(t) ** 2, 0.0, 1.0, epsrel=self.quad_rtol, limit=200)
        return float(val)

    def l2_norm(self) -> float:
        return math.sqrt(self.l2_norm_sq())


def sources_from_density(sigma: SourceDensity, n: int) -> np.ndarray:
    """Cell integrals ``S_i = int_{I_i} sigma`` over the uniform partition of [0, 1]."""
    if n < 2:
        raise GraphonFluxError("need n >= 2")
    S = sigma.cell_integrals(n)
    if not check_mass_conservation(S):
        raise IncompatibleDataError(f"cell integrals sum to {S.sum():.3e}")
    return S


def check_mass_conservation(S) -> bool:
    S = np.asarray(S, dtype=float)
    return bool(abs(S.sum()) <= MASS_TOL * S.size)


def map_c_to_b(C, graph: GraphInstance, r: float) -> np.ndarray:
    """``B_ij = (C_ij + r) / L_ij`` on edges, zero elsewhere."""
    C = np.asarray(C, dtype=float)
    W = graph.adjacency
    if np.any(C[W == 1] < 0):
        raise GraphonFluxError("conductivities must be nonnegative on edges")
    if not np.allclose(C * W, (C * W).T, rtol=0, atol=0):
        raise GraphonFluxError("conductivities must be symmetric")
    L = graph.lengths
    if np.any(L[W == 1] == 0):
        raise DegenerateLengthError("edge with zero length")
    B = np.zeros_like(C)
    mask = W == 1
    B[mask] = (C[mask] + r) / L[mask]
    return B


def map_b_to_c(B, graph: GraphInstance, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Inverse change of variables ``C = B L - r`` on edges.

    Returns ``(C, negative)`` where ``negative`` marks edges with ``C_ij < 0``;
    these occur when ``L_ij < 1`` and the floor is active and are not errors.
    """
    B = np.asarray(B, dtype=float)
    W = graph.adjacency
    C = np.where(W == 1, B * graph.lengths - r, 0.0)
    return C, (W == 1) & (C < 0)


def is_feasible(B, graph: GraphInstance, r: float, atol: float = 0.0) -> bool:
    """Membership of ``B`` in the constraint set (symmetric, >= r on edges, 0 off edges)."""
    B = np.asarray(B, dtype=float)
    W = graph.adjacency
    return bool(
        B.shape == W.shape
        and np.array_equal(B, B.T)
        and np.all(B[W == 1] >= r - atol)
        and np.all(B[W == 0] == 0)
    )


def project_feasible(B, graph: GraphInstance, r: float) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    B = 0.5 * (B + B.T)
    return np.where(graph.adjacency == 1, np.maximum(B, r), 0.0)


def laplacian(weights) -> np.ndarray:
    """Dense graph Laplacian ``D - A`` of a symmetric weight matrix (diagonal ignored)."""
    A = np.array(weights, dtype=float)
    np.fill_diagonal(A, 0.0)
    return np.diag(A.sum(axis=1)) - A


def weighted_connectivity_constant(weights) -> float:
    """Largest lam with ``sum_ij (z_i - z_j)^2 A_ij >= lam N sum_i z_i^2`` on zero-mean z.

    Equals ``2 * fiedler(A) / N``.
    """
    A = np.array(weights, dtype=float)
    n = A.shape[0]
    if n < 2:
        return 0.0
    np.fill_diagonal(A, 0.0)
    ncomp, _ = csgraph.connected_components(sparse.csr_matrix(A > 0), directed=False)
    if ncomp > 1:
        return 0.0
    Lap = laplacian(A)
    if n <= DENSE_EIG_MAX:
        ev = np.linalg.eigvalsh(Lap)
        fiedler = ev[1]
    else:
        # deflate the constant vector, iterate for the smallest remaining eigenvalue
        rng = np.random.default_rng(0)
        X = rng.standard_normal((n, 2))
        Y = np.ones((n, 1))
        vals, _ = sparse_linalg.lobpcg(sparse.csr_matrix(Lap), X, Y=Y, largest=False,
                                       tol=1e-10, maxiter=2000)
        fiedler = float(np.min(vals))
    return max(0.0, float(2.0 * fiedler / n))


def connectivity_constant(graph: GraphInstance) -> float:
    return weighted_connectivity_constant(graph.adjacency)


def check_min_degree_bound(graph: GraphInstance, lam: float) -> bool:
    """Sufficient (not necessary) condition for the connectivity assumption with ``lam``."""
    if graph.num_edges == 0:
        return False
    return bool(np.min(graph.degrees()) >= (1.0 + lam) * graph.n / 2.0)

"""Step functions on [0,1] and [0,1]^2, graphon kernels and sampled graph families.

Cells are ``[(i-1)/N, i/N)`` with the last cell closed. ``lift_matrix``
turns a matrix into a step function; ``project`` takes cell averages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .model import GraphInstance, GraphonFluxError, SourceDensity

QUAD_RTOL = 1e-6
QUAD_CAP = 4096


@dataclass(frozen=True)
class PixelFunction:
    """Piecewise-constant function on the uniform N-cell grid (1-D) or N x N grid (2-D)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim not in (1, 2) or (v.ndim == 2 and v.shape[0] != v.shape[1]) or v.size == 0:
            raise GraphonFluxError(f"pixel values must be a vector or square matrix, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def _index(self, x):
        return np.clip(np.floor(np.asarray(x, dtype=float) * self.n).astype(int), 0, self.n - 1)

    def __call__(self, x, y=None):
        if self.ndim == 1:
            return self.values[self._index(x)]
        return self.values[self._index(x), self._index(y)]

    def integral(self) -> float:
        return float(self.values.mean())

    def l2_norm(self) -> float:
        return math.sqrt(float(np.mean(self.values**2)))

    def refine(self, m: int) -> "PixelFunction":
        if m % self.n:
            raise GraphonFluxError(f"resolution {m} is not a multiple of {self.n}")
        k = m // self.n
        v = np.repeat(self.values, k, axis=0)
        if self.ndim == 2:
            v = np.repeat(v, k, axis=1)
        return PixelFunction(v)

    def inner(self, other: "PixelFunction") -> float:
        """Exact ``int u v`` via the common refinement."""
        m = math.lcm(self.n, other.n)
        return float(np.mean(self.refine(m).values * other.refine(m).values))

    def is_symmetric(self) -> bool:
        return self.ndim == 2 and np.array_equal(self.values, self.values.T)

    def to_csv(self, path) -> None:
        rows = np.atleast_2d(self.values)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for row in rows:
                w.writerow([f"{v:.17g}" for v in row])

    @classmethod
    def from_csv(cls, path) -> "PixelFunction":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        v = np.array(rows)
        return cls(v[0] if v.shape[0] == 1 else v)


def lift_matrix(B) -> PixelFunction:
    return PixelFunction(np.asarray(B, dtype=float))


def lift_vector(v) -> PixelFunction:
    return PixelFunction(np.asarray(v, dtype=float).ravel())


def _overlap(n: int, m: int) -> np.ndarray:
    """``O[i, k] = n |I_i^n  cap  I_k^m|``, so ``O @ v`` averages an m-cell function onto n cells."""
    a = np.arange(n + 1) / n
    b = np.arange(m + 1) / m
    lo = np.maximum(a[:-1, None], b[None, :-1])
    hi = np.minimum(a[1:, None], b[None, 1:])
    return n * np.clip(hi - lo, 0.0, None)


# --------------------------------------------------------------------------- kernels

def _strip_average(n: int, length, kinks) -> np.ndarray:
    """Exact cell averages of a kernel of the form ``1{y in [lo(x), hi(x))}``.

    ``length(x, c, e)`` is the measure of the y-section inside ``[c, e]``, which is
    piecewise linear in x with kinks at ``kinks(c, e)``; the trapezoid rule on the
    kink-augmented grid is then exact.
    """
    t = np.arange(n + 1) / n
    a, b = t[:-1][:, None], t[1:][:, None]
    c, e = t[:-1][None, :], t[1:][None, :]
    pts = [np.broadcast_to(a, (n, n)), np.broadcast_to(b, (n, n))]
    pts += [np.clip(k, a, b) for k in kinks(c, e)]
    X = np.sort(np.stack(pts), axis=0)
    Y = length(X, c, e)
    area = np.sum(0.5 * (Y[1:] + Y[:-1]) * np.diff(X, axis=0), axis=0)
    return area * n * n


class Kernel:
    """Symmetric function on [0,1]^2 given by a closed-form descriptor.

    ``lower_bound`` tags membership of conductivity kernels in the floored set;
    ``zero_one`` marks graphons with values in {0, 1}.
    """

    def __init__(self, func: Callable, descriptor: dict, lower_bound: float = 0.0,
                 zero_one: bool = False, exact_average: Callable | None = None,
                 constant: float | None = None):
        self.func = func
        self.descriptor = descriptor
        self.lower_bound = float(lower_bound)
        self.zero_one = zero_one
        self._exact_average = exact_average
        self.constant = constant

    def __repr__(self):
        return f"Kernel({self.descriptor!r})"

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        return np.asarray(self.func(x, y), dtype=float) * np.ones_like(x)

    # constructors
    @classmethod
    def constant_kernel(cls, c: float) -> "Kernel":
        c = float(c)
        return cls(lambda x, y: np.full_like(x, c), {"kind": "constant", "value": c},
                   lower_bound=c, zero_one=c in (0.0, 1.0),
                   exact_average=lambda n: np.full((n, n), c), constant=c)

    @classmethod
    def band(cls, width: float) -> "Kernel":
        d = float(width)

        def length(x, c, e):
            return np.clip(np.minimum(e, x + d) - np.maximum(c, x - d), 0.0, None)

        return cls(lambda x, y: (np.abs(x - y) < d).astype(float), {"kind": "band", "width": d},
                   zero_one=True,
                   exact_average=lambda n: _strip_average(n, length, lambda c, e: [c - d, e - d, c + d, e + d]))

    @classmethod
    def half(cls) -> "Kernel":
        def length(x, c, e):
            return np.clip(1.0 - x - c, 0.0, e - c)

        return cls(lambda x, y: (x + y < 1).astype(float), {"kind": "half"}, zero_one=True,
                   exact_average=lambda n: _strip_average(n, length, lambda c, e: [1 - e, 1 - c]))

    @classmethod
    def blocks(cls, breaks, values) -> "Kernel":
        """Piecewise constant on the rectangles of a (not necessarily uniform) partition."""
        br = np.asarray(breaks, dtype=float)
        V = np.asarray(values, dtype=float)
        if br[0] != 0 or br[-1] != 1 or np.any(np.diff(br) <= 0):
            raise GraphonFluxError("block breaks must increase from 0 to 1")
        if V.shape != (br.size - 1, br.size - 1) or not np.array_equal(V, V.T):
            raise GraphonFluxError("block values must be a symmetric matrix matching the breaks")

        def idx(x):
            return np.clip(np.searchsorted(br, x, side="right") - 1, 0, V.shape[0] - 1)

        def avg(n):
            t = np.arange(n + 1) / n
            O = n * np.clip(np.minimum(t[1:, None], br[None, 1:]) - np.maximum(t[:-1, None], br[None, :-1]), 0, None)
            return O @ V @ O.T

        return cls(lambda x, y: V[idx(x), idx(y)],
                   {"kind": "blocks", "breaks": br.tolist(), "values": V.tolist()},
                   lower_bound=float(V.min()), zero_one=bool(np.all((V == 0) | (V == 1))),
                   exact_average=avg)

    @classmethod
    def grid(cls, values) -> "Kernel":
        V = np.asarray(values, dtype=float)
        k = cls.blocks(np.linspace(0, 1, V.shape[0] + 1), V)
        k.descriptor = {"kind": "grid", "values": V.tolist()}
        return k

    @classmethod
    def from_pixel(cls, pf: PixelFunction) -> "Kernel":
        return cls.grid(pf.values)

    @classmethod
    def distance(cls, floor: float = 0.0) -> "Kernel":
        """``max(|x - y|, floor)``."""
        f = float(floor)
        return cls(lambda x, y: np.maximum(np.abs(x - y), f), {"kind": "distance", "floor": f},
                   lower_bound=f)

    @classmethod
    def from_callable(cls, func: Callable, lower_bound: float = 0.0, zero_one: bool = False) -> "Kernel":
        return cls(func, {"kind": "callable"}, lower_bound=lower_bound, zero_one=zero_one)

    @classmethod
    def product(cls, *kernels: "Kernel") -> "Kernel":
        consts = [k.constant for k in kernels if k.constant is not None]
        rest = [k for k in kernels if k.constant is None]
        c = float(np.prod(consts)) if consts else 1.0
        if not rest:
            return cls.constant_kernel(c)
        desc = {"kind": "product", "factors": [k.descriptor for k in kernels]}
        lb = c * float(np.prod([k.lower_bound for k in rest])) if all(k.lower_bound >= 0 for k in rest) else -np.inf
        zo = all(k.zero_one for k in rest) and c in (0.0, 1.0)
        exact = None
        if len(rest) == 1 and rest[0]._exact_average is not None:
            inner = rest[0]._exact_average
            exact = lambda n: c * inner(n)  # noqa: E731
        return cls(lambda x, y: c * reduce(np.multiply, [k(x, y) for k in rest]), desc,
                   lower_bound=lb, zero_one=zo, exact_average=exact)

    def power(self, p: float) -> "Kernel":
        if self.constant is not None:
            return Kernel.constant_kernel(self.constant**p)
        if self.zero_one and p > 0:
            return self
        return Kernel(lambda x, y: self(x, y) ** p, {"kind": "power", "base": self.descriptor, "p": p},
                      lower_bound=self.lower_bound**p if self.lower_bound >= 0 else 0.0)

    # serialization
    @classmethod
    def from_json(cls, obj: dict) -> "Kernel":
        kind = obj.get("kind")
        if kind == "constant":
            return cls.constant_kernel(obj["value"])
        if kind == "band":
            return cls.band(obj["width"])
        if kind == "half":
            return cls.half()
        if kind == "blocks":
            return cls.blocks(obj["breaks"], obj["values"])
        if kind == "grid":
            return cls.grid(obj["values"])
        if kind == "distance":
            return cls.distance(obj.get("floor", 0.0))
        if kind == "product":
            return cls.product(*[cls.from_json(f) for f in obj["factors"]])
        if kind == "power":
            return cls.from_json(obj["base"]).power(obj["p"])
        raise GraphonFluxError(f"unknown kernel kind {kind!r}")

    def to_json(self) -> dict:
        if self.descriptor.get("kind") == "callable":
            raise GraphonFluxError("callable kernels are not serializable")
        return dict(self.descriptor)

    # integration
    def cell_averages(self, n: int, rtol: float = QUAD_RTOL, cap: int = QUAD_CAP) -> np.ndarray:
        """``n^2 int_{cell} k`` for every cell of the n x n grid."""
        if self._exact_average is not None:
            return self._exact_average(n)
        return midpoint_cell_averages(self, n, rtol=rtol, cap=cap)

    def integral(self, resolution: int = 64) -> float:
        return float(np.mean(self.cell_averages(resolution)))


def midpoint_cell_averages(func: Callable, n: int, rtol: float = QUAD_RTOL, cap: int = QUAD_CAP,
                           min_resolution: int = 256) -> np.ndarray:
    """Tensor midpoint rule, doubling sub-cells until the max change is below ``rtol``.

    A step discontinuity can leave two coarse refinements identical, so
    convergence is only accepted past ``min_resolution`` and after two
    consecutive small changes.
    """
    k = 1
    prev = None
    stable = 0
    while True:
        m = n * k
        t = (np.arange(m) + 0.5) / m
        vals = func(t[:, None], t[None, :]).reshape(n, k, n, k).mean(axis=(1, 3))
        if prev is not None:
            scale = max(np.max(np.abs(vals)), 1e-300)
            stable = stable + 1 if np.max(np.abs(vals - prev)) <= rtol * scale else 0
            if stable >= 2 and m >= min(min_resolution, cap):
                return vals
        if 2 * m > cap:
            return vals
        prev = vals
        k *= 2


def project(u, n: int) -> PixelFunction:
    """Cell-average projection onto step functions at resolution ``n``.

    ``u`` may be a PixelFunction (any resolution), a Kernel, a SourceDensity, or a
    1-D callable.
    """
    if isinstance(u, PixelFunction):
        m = u.n
        if m == n:
            return u
        if m % n == 0:
            k = m // n
            v = u.values.reshape(n, k).mean(axis=1) if u.ndim == 1 else u.values.reshape(n, k, n, k).mean(axis=(1, 3))
            return PixelFunction(v)
        O = _overlap(n, m)
        return PixelFunction(O @ u.values if u.ndim == 1 else O @ u.values @ O.T)
    if isinstance(u, Kernel):
        return PixelFunction(u.cell_averages(n))
    if isinstance(u, SourceDensity):
        return PixelFunction(n * u.cell_integrals(n))
    if callable(u):
        k, prev, stable = 1, None, 0
        while True:
            m = n * k
            t = (np.arange(m) + 0.5) / m
            vals = np.asarray(u(t), dtype=float).reshape(n, k).mean(axis=1)
            if prev is not None:
                ok = np.max(np.abs(vals - prev)) <= QUAD_RTOL * max(np.max(np.abs(vals)), 1e-300)
                stable = stable + 1 if ok else 0
                if stable >= 2 and m >= 4096:
                    return PixelFunction(vals)
            if 2 * m > QUAD_CAP * QUAD_CAP:
                return PixelFunction(vals)
            prev, k = vals, 2 * k
    raise GraphonFluxError(f"cannot project object of type {type(u).__name__}")


def pressure_difference_field(p: PixelFunction) -> PixelFunction:
    """``(x, y) -> p(x) - p(y)`` at the resolution of ``p``."""
    if p.ndim != 1:
        raise GraphonFluxError("pressure must be a 1-D pixel function")
    v = p.values
    return PixelFunction(v[:, None] - v[None, :])


# --------------------------------------------------------------------------- sampling

def midpoints(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def sample_graph_from_graphon(w: Kernel, lengths, n: int, floor: float = 0.0) -> GraphInstance:
    """Graph with ``W_ij = w(x_i, x_j)`` at cell midpoints, ``W_ii = 0``.

    ``lengths`` is a Kernel evaluated at midpoints or a precomputed N x N matrix;
    either way it is floored at ``floor``.
    """
    if not w.zero_one:
        raise GraphonFluxError("only 0-1 valued graphons can be sampled")
    t = midpoints(n)
    W = w(t[:, None], t[None, :])
    if not np.all((W == 0) | (W == 1)):
        raise GraphonFluxError("graphon is not 0-1 valued at the sample points")
    np.fill_diagonal(W, 0.0)
    if isinstance(lengths, Kernel):
        L = lengths(t[:, None], t[None, :])
    else:
        L = np.asarray(lengths, dtype=float)
        if L.shape != (n, n):
            raise GraphonFluxError(f"length matrix has shape {L.shape}, expected ({n}, {n})")
    L = np.maximum(L, floor)
    L = 0.5 * (L + L.T)
    return GraphInstance(W, L)


def point_cloud(dim: int, n: int, seed: int) -> np.ndarray:
    """``n`` uniform points in ``[0, 1/sqrt(dim)]^dim`` (diameter 1).

    For a fixed seed the first ``n`` points do not depend on how many are drawn.
    """
    if dim < 1:
        raise GraphonFluxError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.random((n, dim)) / math.sqrt(dim)


def lengths_from_point_cloud(dim: int, n: int, seed: int, floor: float) -> np.ndarray:
    """Euclidean distance matrix of a seeded point cloud, floored and capped at 1.

    ``floor = 0`` gives the unfloored distances (zero diagonal).
    """
    if floor < 0:
        raise GraphonFluxError("floor must be >= 0")
    D = squareform(pdist(point_cloud(dim, n, seed)))
    return np.minimum(np.maximum(D, floor), 1.0)


def _as_sampler(a):
    if isinstance(a, (PixelFunction, Kernel)):
        return a
    if isinstance(a, (int, float)):
        return Kernel.constant_kernel(a)
    raise GraphonFluxError(f"cannot evaluate object of type {type(a).__name__}")


def l1_distance(a, b, resolution: int) -> float:
    """Midpoint-rule approximation of ``int |a - b|`` on the grid of the given resolution."""
    a, b = _as_sampler(a), _as_sampler(b)
    t = midpoints(resolution)
    one_d = all(isinstance(f, PixelFunction) and f.ndim == 1 for f in (a, b))
    if one_d:
        return float(np.mean(np.abs(a(t) - b(t))))
    X, Y = t[:, None], t[None, :]
    return float(np.mean(np.abs(a(X, Y) - b(X, Y))))


# --------------------------------------------------------------------------- (L3)

@dataclass
class L3Result:
    """Outcome of a reciprocal-length integrability check.

    ``status`` is ``finite``, ``divergent`` or ``unresolved``; ``norm`` is
    ``inf`` unless finite. ``trace`` holds ``(resolution, norm)`` pairs.
    """

    q: float
    norm: float
    status: str
    trace: list = field(default_factory=list)
    growth_rate: float = 0.0
    last_change: float = 0.0
    singular_cells: int = 0

    @property
    def finite(self) -> bool:
        return self.status == "finite"

    def to_json(self) -> dict:
        return {
            "q": self.q,
            "norm": self.norm if math.isfinite(self.norm) else "inf",
            "status": self.status,
            "trace": [[m, v if math.isfinite(v) else "inf"] for m, v in self.trace],
            "growth_rate": self.growth_rate,
            "last_change": self.last_change,
            "singular_cells": self.singular_cells,
        }


def classify_trace(trace, q: float, rtol: float = 0.01, growth_tol: float = 0.05,
                   singular_cells: int = 0) -> L3Result:
    """Finite iff the last refinement changed the norm by at most ``rtol`` and
    the log-log growth rate over the trace stays below ``growth_tol``."""
    ms = np.array([m for m, _ in trace], dtype=float)
    vs = np.array([v for _, v in trace], dtype=float)
    if not np.all(np.isfinite(vs)):
        return L3Result(q, math.inf, "divergent", list(trace), math.inf, math.inf, singular_cells)
    if len(trace) < 2:
        return L3Result(q, float(vs[-1]), "unresolved", list(trace), 0.0, math.inf, singular_cells)
    rate = float(np.polyfit(np.log(ms), np.log(vs), 1)[0])
    last = float(abs(vs[-1] - vs[-2]) / vs[-2])
    if rate > growth_tol:
        status = "divergent"
    elif last <= rtol:
        status = "finite"
    else:
        status = "unresolved"
    norm = math.inf if status == "divergent" else float(vs[-1])
    return L3Result(q, norm, status, list(trace), rate, last, singular_cells)


def _reciprocal_norm(L: np.ndarray, q: float, skip_diagonal: bool) -> tuple[float, int]:
    m = L.shape[0]
    mask = L > 0
    if skip_diagonal:
        np.fill_diagonal(mask, False)
    with np.errstate(divide="ignore"):
        s = float(np.sum(L[mask] ** (-q))) / m**2
    singular = int(np.count_nonzero(~mask)) - (m if skip_diagonal else 0)
    return s ** (1.0 / q), singular


def check_assumption_L3(lengths, gamma: float, resolution: int = 1024, base: int = 32,
                        rtol: float = 0.01) -> L3Result:
    """Norm of the reciprocal lengths in ``L^q``, ``q = 2(gamma+1)/gamma``.

    For a Kernel the midpoint rule is applied at dyadic resolutions up to
    ``resolution``; cells whose midpoint length is zero are counted as
    singular and skipped, so a non-integrable singularity shows up as
    unbounded growth of the trace. A PixelFunction is integrated exactly
    (its diagonal cells are ignored: they carry no edges).
    """
    if not gamma > 1:
        raise GraphonFluxError("gamma must be > 1")
    q = 2 * (gamma + 1) / gamma
    if isinstance(lengths, PixelFunction):
        v, sing = _reciprocal_norm(np.array(lengths.values), q, skip_diagonal=True)
        trace = [(lengths.n, v)]
        if sing:
            return L3Result(q, math.inf, "divergent", trace, math.inf, math.inf, sing)
        return L3Result(q, v, "finite", trace, 0.0, 0.0, 0)
    kernel = _as_sampler(lengths)
    trace, sing = [], 0
    m = min(base, resolution)
    while m <= resolution:
        t = midpoints(m)
        v, sing = _reciprocal_norm(kernel(t[:, None], t[None, :]), q, skip_diagonal=False)
        trace.append((m, v))
        m *= 2
    return classify_trace(trace, q, rtol=rtol, singular_cells=sing)


def check_assumption_L3_point_cloud(dim: int, seed: int, floor: float, gamma: float,
                                    n_min: int = 64, n_max: int = 4096, rtol: float = 0.01) -> L3Result:
    """Trace of ``||(l^N)^-1||_q`` over nested point clouds of doubling size."""
    q = 2 * (gamma + 1) / gamma
    pts = point_cloud(dim, n_max, seed)
    trace = []
    n = n_min
    while n <= n_max:
        d = np.minimum(np.maximum(pdist(pts[:n]), floor), 1.0)
        with np.errstate(divide="ignore"):
            s = 2.0 * float(np.sum(d ** (-q))) / n**2
        trace.append((n, s ** (1.0 / q)))
        n *= 2
    return classify_trace(trace, q, rtol=rtol)

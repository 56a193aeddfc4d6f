"""Randomized invariants of the solver, energy, optimizer and pixel operators."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from graphonflux.continuum import semi_discrete_energy
from graphonflux.energy import compute_flows, discrete_energy, energy_gradient
from graphonflux.graphon import Kernel, PixelFunction, lift_matrix, project, sample_graph_from_graphon
from graphonflux.kirchhoff import solve_kirchhoff, verify_kirchhoff_estimate
from graphonflux.model import (
    GraphInstance,
    GraphonFluxError,
    ModelParams,
    SourceDensity,
    check_min_degree_bound,
    connectivity_constant,
    is_feasible,
)
from graphonflux.optimizer import minimize_discrete

from conftest import random_conductivities, random_connected_graph, random_sources

seeds = st.integers(0, 2**32 - 1)
SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def instance(seed, n_lo=2, n_hi=12, r=0.2):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_lo, n_hi + 1))
    g = random_connected_graph(rng, n, density=float(rng.uniform(0.2, 0.9)))
    return rng, g, random_conductivities(rng, g, r), random_sources(rng, n)


# ---------------------------------------------------------------- graph instances

@SETTINGS
@given(seeds)
def test_constructor_rejects_asymmetric_lengths(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    A = np.ones((n, n)) - np.eye(n)
    L = rng.uniform(0.1, 1.0, size=(n, n))
    L[0, 1] = L[1, 0] + 0.01 if L[1, 0] < 0.99 else L[1, 0] - 0.01
    with pytest.raises(GraphonFluxError):
        GraphInstance(A, L)
    with pytest.raises(GraphonFluxError):
        GraphInstance(A, 1.5 * np.ones((n, n)))


@pytest.mark.parametrize("n", [3, 4, 9, 16, 33, 64])
def test_complete_graph_constant(n):
    assert abs(connectivity_constant(GraphInstance.complete(n)) - 2.0) <= 1e-10


@SETTINGS
@given(seeds, st.floats(0.05, 1.0))
def test_min_degree_bound_is_sufficient(seed, lam):
    rng = np.random.default_rng(seed)
    g = random_connected_graph(rng, int(rng.integers(3, 20)), density=float(rng.uniform(0.6, 1.0)))
    if check_min_degree_bound(g, lam):
        assert connectivity_constant(g) >= lam * (1 - 1e-12)


@SETTINGS
@given(seeds)
def test_connectivity_permutation_invariant(seed):
    rng, g, _, _ = instance(seed)
    perm = rng.permutation(g.n)
    assert connectivity_constant(g.permuted(perm)) == pytest.approx(connectivity_constant(g), abs=1e-10)


# ---------------------------------------------------------------- Kirchhoff

@SETTINGS
@given(seeds)
def test_solution_contract(seed):
    _, g, B, S = instance(seed)
    P, rep = solve_kirchhoff(g, B, S)
    assert abs(P.sum()) <= 1e-10 * (1 + np.abs(P).max())
    assert rep.residual_norm <= 1e-10 * np.linalg.norm(S)


@SETTINGS
@given(seeds)
def test_unique_from_different_starts(seed):
    rng, g, B, S = instance(seed)
    P1, _ = solve_kirchhoff(g, B, S, method="conjugate-gradient", tol=1e-13, x0=rng.standard_normal(g.n))
    P2, _ = solve_kirchhoff(g, B, S, method="conjugate-gradient", tol=1e-13, x0=10 * rng.standard_normal(g.n))
    np.testing.assert_allclose(P1, P2, atol=1e-10 * max(1.0, np.abs(P1).max()))


@SETTINGS
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_sources(seed, a, b):
    rng, g, B, S1 = instance(seed)
    S2 = random_sources(rng, g.n)
    P1, _ = solve_kirchhoff(g, B, S1)
    P2, _ = solve_kirchhoff(g, B, S2)
    P, _ = solve_kirchhoff(g, B, a * S1 + b * S2)
    np.testing.assert_allclose(P, a * P1 + b * P2, atol=1e-9 * max(1.0, np.abs(P).max()))


@SETTINGS
@given(seeds)
def test_permutation_equivariance(seed):
    rng, g, B, S = instance(seed)
    perm = rng.permutation(g.n)
    P, _ = solve_kirchhoff(g, B, S)
    Pp, _ = solve_kirchhoff(g.permuted(perm), B[np.ix_(perm, perm)], S[perm])
    np.testing.assert_allclose(Pp, P[perm], atol=1e-10 * max(1.0, np.abs(P).max()))


@SETTINGS
@given(seeds, st.floats(0.1, 10))
def test_conductance_scaling(seed, c):
    _, g, B, S = instance(seed)
    P, _ = solve_kirchhoff(g, B, S)
    Pc, _ = solve_kirchhoff(g, c * B, S)
    np.testing.assert_allclose(Pc, P / c, atol=1e-10 * max(1.0, np.abs(P).max()))


@SETTINGS
@given(seeds)
def test_kirchhoff_estimate_on_random_instances(seed):
    rng, g, _, _ = instance(seed, n_lo=3)
    r = float(rng.uniform(0.05, 1.0))
    B = random_conductivities(rng, g, r)
    v = rng.standard_normal(int(rng.integers(2, 9)))
    sigma = SourceDensity.grid(v - v.mean())
    S = sigma.cell_integrals(g.n)
    P, _ = solve_kirchhoff(g, B, S)
    params = ModelParams(r=r, lam=connectivity_constant(g))
    assert verify_kirchhoff_estimate(g, params, S, P, sigma.l2_norm_sq())


# ---------------------------------------------------------------- energy

@SETTINGS
@given(seeds)
def test_flows_antisymmetric(seed):
    rng, g, B, S = instance(seed)
    P, _ = solve_kirchhoff(g, B, S)
    Q = compute_flows(g, B * g.lengths, P)
    np.testing.assert_array_equal(Q, -Q.T)


@SETTINGS
@given(seeds)
def test_energy_permutation_invariant(seed):
    rng, g, B, S = instance(seed)
    p = ModelParams(gamma=float(rng.uniform(1.2, 3)))
    perm = rng.permutation(g.n)
    e1 = discrete_energy(g, B, S, p).total
    e2 = discrete_energy(g.permuted(perm), B[np.ix_(perm, perm)], S[perm], p).total
    assert e2 == pytest.approx(e1, rel=1e-12)


@SETTINGS
@given(seeds, st.floats(0.0, 1.0))
def test_energy_convex_along_segments(seed, t):
    rng, g, B1, S = instance(seed)
    B2 = random_conductivities(rng, g, 0.2)
    p = ModelParams(gamma=float(rng.uniform(1.1, 3)), r=0.2)
    F = lambda B: discrete_energy(g, B, S, p).total  # noqa: E731
    assert F(t * B1 + (1 - t) * B2) <= t * F(B1) + (1 - t) * F(B2) + 1e-10


@SETTINGS
@given(seeds)
def test_gradient_symmetric_and_zero_off_edges(seed):
    _, g, B, S = instance(seed)
    G = energy_gradient(g, B, S, ModelParams())
    np.testing.assert_array_equal(G, G.T)
    assert np.all(G[g.adjacency == 0] == 0)


# ---------------------------------------------------------------- optimizer

@settings(max_examples=15, deadline=None)
@given(seeds)
def test_minimizer_kkt(seed):
    rng, g, _, S = instance(seed, n_hi=8)
    p = ModelParams(gamma=float(rng.uniform(1.5, 3)), nu=float(rng.uniform(0.5, 2)), r=0.2)
    B, rep = minimize_discrete(g, S, p)
    assert rep.converged and is_feasible(B, g, p.r)
    P, _ = solve_kirchhoff(g, B, S)
    for i, j in zip(*g.edges):
        drive = (P[i] - P[j]) ** 2
        cost = p.nu * B[i, j] ** (p.gamma - 1) * g.lengths[i, j] ** (p.gamma + 1)
        if B[i, j] > p.r:
            assert abs(drive - cost) <= 1e-6
        else:
            assert drive <= cost + 1e-6


def test_unique_minimum_from_random_starts():
    rng, g, _, S = instance(7, n_lo=6, n_hi=6)
    p = ModelParams(r=0.1)
    energies = []
    for _ in range(20):
        B0 = random_conductivities(rng, g, p.r, spread=5.0)
        _, rep = minimize_discrete(g, S, p, B0=B0)
        energies.append(rep.final_energy.total)
    assert (max(energies) - min(energies)) <= 1e-6 * abs(min(energies))


# ---------------------------------------------------------------- pixel operators

pixel_sizes = st.integers(1, 12)


@SETTINGS
@given(seeds, pixel_sizes, pixel_sizes)
def test_projection_non_expansive(seed, m, n):
    rng = np.random.default_rng(seed)
    u = PixelFunction(rng.standard_normal((m, m)))
    assert project(u, n).l2_norm() <= u.l2_norm() * (1 + 1e-12)


@SETTINGS
@given(seeds, st.integers(2, 20))
def test_sampled_graphs_are_valid(seed, n):
    rng = np.random.default_rng(seed)
    w = Kernel.band(float(rng.uniform(0.2, 1.0)))
    g = sample_graph_from_graphon(w, Kernel.distance(), n, floor=float(rng.uniform(0.01, 0.5)))
    assert np.array_equal(g.adjacency, g.adjacency.T)
    assert np.all(g.lengths <= 1.0)


@SETTINGS
@given(seeds)
def test_semi_discrete_cell_average_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 8))
    g = random_connected_graph(rng, n)
    p = ModelParams(r=0.1)
    k = int(rng.integers(1, 4))
    fine = rng.uniform(0.1, 3.0, size=(k * n + 1, k * n + 1))
    b = PixelFunction(0.5 * (fine + fine.T))
    w, l = lift_matrix(g.adjacency), lift_matrix(g.lengths)
    sigma = SourceDensity.cosine(int(rng.integers(1, 4)))
    k1 = semi_discrete_energy(b, w, l, sigma, p, n).kinetic
    k2 = semi_discrete_energy(project(b, n), w, l, sigma, p, n).kinetic
    assert k1 == pytest.approx(k2, rel=1e-10)

import math

import numpy as np
import pytest

from graphonflux.energy import discrete_energy
from graphonflux.model import GraphInstance, GraphonFluxError, ModelParams, is_feasible
from graphonflux.optimizer import (
    GridSpec,
    OptimizerOptions,
    brute_force_minimize,
    gradient_flow_integrate,
    minimize_discrete,
)

from conftest import random_connected_graph, random_sources

EDGE = GraphInstance.complete(2)
HALF = np.array([0.5, -0.5])
B_STAR = 4 ** (1 / 3)
F_STAR = 1 / B_STAR + B_STAR**2 / 8


def test_two_node_minimizer():
    B, rep = minimize_discrete(EDGE, HALF, ModelParams(r=0.1))
    assert rep.converged
    assert abs(B[0, 1] - B_STAR) <= 1e-6
    assert abs(rep.final_energy.total - F_STAR) <= 1e-10
    assert rep.floor_active_edges == 0


def test_two_node_floor_active():
    B, rep = minimize_discrete(EDGE, HALF, ModelParams(r=2.0))
    assert B[0, 1] == 2.0
    assert rep.floor_active_edges == 1
    assert abs(rep.final_energy.total - 1.0) <= 1e-12


def test_zero_sources_gives_floor(rng):
    g = random_connected_graph(rng, 6)
    B, rep = minimize_discrete(g, np.zeros(6), ModelParams(r=0.3))
    np.testing.assert_array_equal(B[g.adjacency == 1], 0.3)
    assert rep.floor_active_edges == g.num_edges


def test_result_is_feasible_and_stationary(rng):
    g = random_connected_graph(rng, 7)
    S = random_sources(rng, 7)
    p = ModelParams(r=0.2)
    B, rep = minimize_discrete(g, S, p)
    assert is_feasible(B, g, p.r)
    assert rep.converged and rep.projected_grad_norm <= 1e-8
    # no feasible random perturbation does better
    F = rep.final_energy.total
    for _ in range(20):
        D = rng.standard_normal((7, 7)) * 1e-3
        D = np.where(g.adjacency == 1, D + D.T, 0.0)
        B2 = np.where(g.adjacency == 1, np.maximum(B + D, p.r), 0.0)
        assert discrete_energy(g, B2, S, p).total >= F - 1e-12


def test_budget_exhaustion_returns_feasible(rng):
    g = random_connected_graph(rng, 8)
    S = random_sources(rng, 8)
    p = ModelParams(r=0.1)
    B, rep = minimize_discrete(g, S, p, OptimizerOptions(max_iters=1))
    assert not rep.converged
    assert rep.iterations == 1
    assert is_feasible(B, g, p.r)
    assert "max_iters" in rep.message


def test_options_validation():
    with pytest.raises(GraphonFluxError):
        OptimizerOptions(max_iters=0)
    with pytest.raises(GraphonFluxError):
        OptimizerOptions(armijo_c=1.5)


class TestFlow:
    def test_converges_to_minimizer(self):
        traj = gradient_flow_integrate(EDGE, np.ones((2, 2)), HALF, ModelParams(r=0.1), dt=0.05, steps=400)
        assert abs(traj.states[-1][0, 1] - B_STAR) <= 1e-4
        assert all(b <= a + 1e-15 for a, b in zip(traj.energies, traj.energies[1:]))

    def test_equilibrium_is_stationary(self):
        B0 = np.array([[0.0, B_STAR], [B_STAR, 0.0]])
        traj = gradient_flow_integrate(EDGE, B0, HALF, ModelParams(r=0.1), dt=0.05, steps=20)
        assert abs(traj.states[-1][0, 1] - B_STAR) <= 1e-10

    def test_large_step_is_halved(self):
        traj = gradient_flow_integrate(EDGE, np.full((2, 2), 0.2), HALF, ModelParams(r=0.1), dt=50.0, steps=10)
        assert min(traj.dts) < 50.0
        assert all(b <= a for a, b in zip(traj.energies, traj.energies[1:]))

    def test_csv(self, tmp_path):
        g = GraphInstance.complete(3)
        S = np.array([1.0, -0.5, -0.5])
        traj = gradient_flow_integrate(g, np.ones((3, 3)), S, ModelParams(), dt=0.01, steps=3)
        path = tmp_path / "flow.csv"
        traj.write_csv(path, g)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,edge_id,i,j,B,energy"
        assert len(lines) == 1 + 4 * 3

    def test_bad_dt(self):
        with pytest.raises(GraphonFluxError):
            gradient_flow_integrate(EDGE, np.ones((2, 2)), HALF, ModelParams(), dt=0, steps=1)


class TestBruteForce:
    def test_two_node(self):
        B, F = brute_force_minimize(EDGE, HALF, ModelParams(r=0.1))
        assert abs(F - F_STAR) <= 1e-3
        assert abs(B[0, 1] - B_STAR) <= 1e-3

    def test_triangle_matches_descent(self):
        g = GraphInstance.complete(3)
        for c in (0.5, 1.0, 2.0):
            S = c * np.array([1.0, -0.5, -0.5])
            p = ModelParams(r=0.1)
            _, F_bf = brute_force_minimize(g, S, p)
            _, rep = minimize_discrete(g, S, p)
            assert abs(F_bf - rep.final_energy.total) <= 1e-3

    def test_zero_sources(self):
        g = GraphInstance.complete(3)
        B, _ = brute_force_minimize(g, np.zeros(3), ModelParams(r=0.25))
        np.testing.assert_array_equal(B[g.adjacency == 1], 0.25)

    def test_edge_limit(self):
        with pytest.raises(GraphonFluxError):
            brute_force_minimize(GraphInstance.complete(4), np.array([1, -1, 0, 0.0]), ModelParams())

    def test_explicit_grid(self):
        B, F = brute_force_minimize(EDGE, HALF, ModelParams(r=0.1), GridSpec(points=21, levels=8, b_max=3.0))
        assert math.isclose(F, F_STAR, abs_tol=1e-3)

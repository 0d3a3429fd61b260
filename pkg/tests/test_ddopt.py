"""Optimization-based domain decomposition at the full order."""

import numpy as np
import pytest

from compflow.geometry import build_network, branching_config, chain_config
from compflow.fem import instantiate_network, network_norm, solve_monolithic
from compflow.ddopt import (DDProblem, NEW, STANDARD, FomLocal,
                            formulation_by_name, gnm_solve, jump_norms,
                            make_layout, objective_value,
                            port_control_norm_matrix, solve_control_ls,
                            sqp_solve)


@pytest.fixture(scope="module")
def chain_problem(request):
    net = build_network(chain_config(2, Re=50.0))
    comps = instantiate_network(net, 2)
    return net, comps, DDProblem(comps=comps, ports=net.ports)


def test_formulation_lookup():
    assert formulation_by_name("new") is NEW
    assert formulation_by_name("standard") is STANDARD
    with pytest.raises(ValueError):
        formulation_by_name("mixed")


def test_formulation_flags():
    assert NEW.include_h and NEW.jump_pressure and NEW.reg == "h1"
    assert not STANDARD.include_h and not STANDARD.jump_pressure
    assert STANDARD.reg == "l2"


class TestLayout:
    def test_sizes(self, chain_problem):
        net, comps, problem = chain_problem
        n_t = 2 * comps[0].space.mesh.resolution + 1
        assert problem.layout.n == 3 * n_t          # one port, (g_x, g_y, h)
        lay_std = make_layout(comps, net.ports, STANDARD)
        assert lay_std.n == 2 * n_t                 # no h control

    def test_reg_matrix_spd(self, chain_problem):
        _, _, problem = chain_problem
        S = problem.layout.reg_matrix()
        assert np.allclose(S, S.T)
        assert np.linalg.eigvalsh(S).min() > 0

    def test_h1_penalizes_oscillation(self):
        n_t = 9
        Sh1 = port_control_norm_matrix(n_t, "h1")
        Sl2 = port_control_norm_matrix(n_t, "l2")
        g = np.zeros(3 * n_t)
        g[:n_t] = np.cos(np.linspace(0, 6 * np.pi, n_t))
        assert g @ Sh1 @ g > 10 * (g @ Sl2 @ g)
        # the multiplier block is L2 in both
        h = np.zeros(3 * n_t)
        h[2 * n_t:] = 1.0
        assert h @ Sh1 @ h == pytest.approx(h @ Sl2 @ h)


def test_solve_control_ls_matches_dense():
    rng = np.random.default_rng(0)
    G = rng.standard_normal((12, 5))
    d = rng.standard_normal(12)
    L = rng.standard_normal((5, 5))
    S = L @ L.T + np.eye(5)
    delta = 1e-3
    s = solve_control_ls(G, d, S, delta)
    expect = np.linalg.solve(G.T @ G + delta * S, G.T @ d)
    assert np.allclose(s, expect, atol=1e-10)


def test_solve_control_ls_rank_deficient_delta0():
    # duplicated columns + delta = 0: falls back to minimum-norm LS
    rng = np.random.default_rng(1)
    G0 = rng.standard_normal((8, 3))
    G = np.hstack([G0, G0])
    d = rng.standard_normal(8)
    s = solve_control_ls(G, d, np.eye(6), 0.0)
    assert np.allclose(G.T @ (G @ s - d), 0.0, atol=1e-8)


class TestSqp:
    def test_chain_matches_monolithic(self, chain_problem):
        net, comps, problem = chain_problem
        mono, _ = solve_monolithic(comps, net)
        res = sqp_solve(problem)
        assert res.converged
        err = network_norm(comps, [w - m for w, m in zip(res.states, mono)])
        assert err / network_norm(comps, mono) < 1e-8
        # the objective floor is the delta-weighted control regularization
        assert res.jump < 1e-16
        assert res.objective < 1e-9

    def test_jumps_vanish_at_optimum(self, chain_problem):
        net, comps, problem = chain_problem
        res = sqp_solve(problem)
        locs = {l.comp.index: l for l in res.locals_}
        jn = jump_norms(problem, locs)
        for j in jn.values():
            assert j["velocity_sq"] < 1e-17
            assert j["pressure_sq"] < 1e-17

    def test_log_is_monotone_enough(self, chain_problem):
        _, _, problem = chain_problem
        res = sqp_solve(problem)
        objs = [row[1] for row in res.log]
        assert objs[-1] <= objs[0]
        assert res.jump == res.log[-1][2]

    def test_objective_value_consistency(self, chain_problem):
        _, _, problem = chain_problem
        res = sqp_solve(problem)
        locs = {l.comp.index: l for l in res.locals_}
        obj, jump = objective_value(problem, locs, res.s)
        reg = problem.layout.control_norm(res.s) ** 2
        assert obj == pytest.approx(0.5 * jump + 0.5 * problem.delta * reg)
        assert obj == pytest.approx(res.objective, rel=1e-6, abs=1e-18)


def test_gnm_agrees_with_sqp(chain_problem):
    net, comps, problem = chain_problem
    r1 = sqp_solve(problem)
    r2 = gnm_solve(problem)
    assert r2.converged
    err = network_norm(comps, [a - b for a, b in zip(r1.states, r2.states)])
    assert err / network_norm(comps, r1.states) < 1e-6


def test_standard_formulation_converges_on_branching():
    net = build_network(branching_config(Re=50.0))
    comps = instantiate_network(net, 2)
    problem = DDProblem(comps=comps, ports=net.ports, formulation=STANDARD)
    res = sqp_solve(problem)
    assert res.converged
    # without the pressure jump the velocity jump still has to vanish
    locs = {l.comp.index: l for l in res.locals_}
    for j in jump_norms(problem, locs).values():
        assert j["velocity_sq"] < 1e-12


def test_new_formulation_on_branching_matches_monolithic():
    net = build_network(branching_config(Re=50.0))
    comps = instantiate_network(net, 2)
    mono, _ = solve_monolithic(comps, net)
    res = sqp_solve(DDProblem(comps=comps, ports=net.ports))
    assert res.converged
    err = network_norm(comps, [w - m for w, m in zip(res.states, mono)])
    assert err / network_norm(comps, mono) < 1e-6


def test_fomlocal_affine_trace_consistency(chain_problem):
    # the affine trace map t0 + TB s_loc agrees with the trace of the state
    # the finalize step commits
    net, comps, problem = chain_problem
    pid = net.ports[0].index
    rng = np.random.default_rng(3)
    s = 1e-3 * rng.standard_normal(problem.layout.n)

    loc = FomLocal(comps[1], problem.layout)
    loc.prepare(s, "sqp")
    t0, TB, _ = loc.trace_affine(pid)
    loc.finalize(s, "sqp")
    assert np.allclose(t0 + TB @ loc.local_control(s),
                       loc.trace_values(pid), atol=1e-12)

    # gnm recenters the model at the exact local solve
    loc2 = FomLocal(comps[1], problem.layout)
    loc2.prepare(s, "gnm")
    t0, TB, _ = loc2.trace_affine(pid)
    assert np.allclose(t0 + TB @ loc2.local_control(s),
                       loc2.trace_values(pid), atol=1e-10)

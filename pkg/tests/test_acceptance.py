"""End-to-end acceptance suite.

Each test pins one advertised capability of the library at desk scale:
analytic exactness, formulation comparisons, reduced-model accuracy,
enrichment behavior and numerical hygiene.  Expensive artifacts (training
sweeps, reference solves) are shared through module-scoped fixtures.
"""

import math

import numpy as np
import pytest

from compflow.geometry import (ArchetypeLabel, GeomParams, branching_config,
                               build_network, chain_config, rot2,
                               random_tree_config)
from compflow.mesh import make_space, port_trace
from compflow.fem import (FlowComponent, assemble, frozen_tau_at,
                          instantiate_network, network_norm, reference_lift,
                          rotate_state, solve_local, solve_monolithic)
from compflow.ddopt import (DDProblem, Formulation, NEW, STANDARD,
                            RankDeficiencyError, compare_formulations,
                            construct_interface_control,
                            h_star_refinement_study, port_control_norm_matrix,
                            sqp_solve)
from compflow.mesh import segment_matrices_1d
from compflow.rom import (RomSetup, build_test_space, condensed_sensitivity,
                          enrich_trial_space, eval_errors, eval_port_errors,
                          orthonormalize, pod, rom_dd_solve)


# ---------------------------------------------------------------------------
# shared references

def _poiseuille_state(comp, scale, x_out):
    x, y = comp.coords.T
    w = np.zeros(comp.n_dofs)
    nn = comp.n_nodes
    w[:nn] = scale * 4.0 * y * (1.0 - y)
    w[2 * nn:] = scale * 8.0 * comp.nu * (x_out - x)
    return w


@pytest.fixture(scope="module")
def branching_re100():
    """Fig.-2(b)-style 4-component network at Re=100, with monolithic ref."""
    net = build_network(branching_config(Re=100.0))
    comps = instantiate_network(net, 4)
    mono, _ = solve_monolithic(comps, net)
    return net, comps, mono


@pytest.fixture(scope="module")
def formulation_report(branching_re100):
    net, comps, mono = branching_re100
    return compare_formulations(comps, net.ports, mono_states=mono)


def _fixed_geometry_sweep(res, train_Re):
    """FOM DD solutions of the branching network over a Reynolds sweep."""
    state_snaps = {i: [] for i in range(4)}
    states = {i: [] for i in range(4)}
    ctrl_snaps = {}
    for Re in train_Re:
        net = build_network(branching_config(Re=float(Re)))
        comps = instantiate_network(net, res)
        problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW)
        ref = sqp_solve(problem)
        for i, (c, w) in enumerate(zip(comps, ref.states)):
            state_snaps[i].append(w - c.lift)
            states[i].append(w)
        for p in net.ports:
            ctrl_snaps.setdefault(p.index, []).append(
                ref.s[problem.layout.slices[p.index]])
    return state_snaps, states, ctrl_snaps


@pytest.fixture(scope="module")
def fixed_geometry_training():
    return _fixed_geometry_sweep(4, np.linspace(50.0, 150.0, 30))


def _control_pod(ctrl_snaps, m, res):
    S = port_control_norm_matrix(2 * res + 1, "h1")
    return {pi: pod(np.column_stack(v), S, m).V for pi, v in ctrl_snaps.items()}


# ---------------------------------------------------------------------------
# 1. analytic exactness of the assembly and the DD optimum

class TestPoiseuilleExactness:
    RES = 6

    @pytest.fixture(scope="class")
    def chain(self):
        net = build_network(chain_config(2, Re=100.0))
        comps = instantiate_network(net, self.RES)
        return net, comps

    def test_monolithic(self, chain):
        net, comps = chain
        states, _ = solve_monolithic(comps, net)
        x_out = 6.0
        for comp, w in zip(comps, states):
            exact = _poiseuille_state(comp, 1.0, x_out)
            assert comp.x_norm(w - exact) / comp.x_norm(exact) <= 1e-8

    def test_dd(self, chain):
        net, comps = chain
        res = sqp_solve(DDProblem(comps=comps, ports=net.ports,
                                  formulation=NEW, delta=1e-8))
        assert res.converged
        x_out = 6.0
        for comp, w in zip(comps, res.states):
            exact = _poiseuille_state(comp, 1.0, x_out)
            assert comp.x_norm(w - exact) / comp.x_norm(exact) <= 1e-8


# ---------------------------------------------------------------------------
# 2. DD matches the monolithic solution on the 4-component network

def test_dd_matches_monolithic_branching(formulation_report):
    entry = formulation_report["new"]
    assert entry["converged"]
    assert entry["state_error_rel"] <= 1e-4
    jump_sq = entry["velocity_jump_l2"] ** 2 + entry["pressure_jump_l2"] ** 2
    assert jump_sq <= 1e-10


# ---------------------------------------------------------------------------
# 3. pressure-jump contrast between the two formulations

def test_pressure_jump_formulation_contrast(formulation_report):
    p_new = formulation_report["new"]["pressure_jump_l2"]
    p_std = formulation_report["standard"]["pressure_jump_l2"]
    assert p_std >= 100.0 * p_new


# ---------------------------------------------------------------------------
# 4. H1 regularization yields smoother port controls than L2

def test_h1_regularization_reduces_control_variation(branching_re100):
    net, comps, _ = branching_re100
    tv = {}
    for reg in ("h1", "l2"):
        form = Formulation(include_h=True, jump_pressure=True, reg=reg,
                           name=f"new-{reg}")
        problem = DDProblem(comps=comps, ports=net.ports, formulation=form)
        res = sqp_solve(problem)
        assert res.converged
        sl = problem.layout.slices[net.ports[0].index]
        n_t = (sl.stop - sl.start) // 3
        g_x = res.s[sl][:n_t]
        tv[reg] = float(np.abs(np.diff(g_x)).sum())
    assert tv["h1"] < tv["l2"]


# ---------------------------------------------------------------------------
# 5. zero-penalty optimum coincides with the monolithic solution

class TestZeroPenaltyOptimum:
    @pytest.fixture(scope="class")
    def chain(self):
        net = build_network(chain_config(2, Re=100.0))
        comps = instantiate_network(net, 4)
        mono, _ = solve_monolithic(comps, net)
        return net, comps, mono

    def test_dd_objective_and_state(self, chain):
        net, comps, mono = chain
        res = sqp_solve(DDProblem(comps=comps, ports=net.ports,
                                  formulation=NEW, delta=0.0))
        assert res.objective <= 1e-12
        err = network_norm(comps, [a - b for a, b in zip(res.states, mono)])
        assert err / network_norm(comps, mono) <= 1e-8

    def test_constructed_control_satisfies_local_systems(self, chain):
        # the converse direction: restrict the monolithic solution and build
        # the interface control that balances both local problems
        net, comps, mono = chain
        for port in net.ports:
            s_p = construct_interface_control(comps, mono, port)
            for side in (port.up, port.down):
                comp = comps[side[0]]
                w = mono[side[0]]
                R, _ = assemble(comp, w, need_jac=False)
                R = R + comp.neumann + comp.couplings[port.index].E @ s_p
                assert comp.dual_norm(R[comp.free]) <= 1e-10


# ---------------------------------------------------------------------------
# 6. the continuity control vanishes under mesh refinement

def test_interface_control_refinement():
    rows = h_star_refinement_study(mesh_cells=(4, 8, 16))
    h = [r["h_star_l2"] for r in rows]
    assert h[1] < h[0]
    assert h[2] < h[1]


# ---------------------------------------------------------------------------
# 7. SQP iteration counts

class TestSqpIterations:
    def test_stokes_one_iteration(self):
        # linear constraints: the first QP step is the exact optimum
        net = build_network(branching_config(Re=100.0))
        comps = instantiate_network(net, 4, convection=False)
        res = sqp_solve(DDProblem(comps=comps, ports=net.ports,
                                  formulation=NEW))
        assert res.log[0][2] <= 1e-12  # jump after the first iteration

    def test_reduced_control_iteration_count(self, fixed_geometry_training):
        _, _, ctrl_snaps = fixed_geometry_training
        ctrl_bases = _control_pod(ctrl_snaps, 10, 4)
        net = build_network(branching_config(Re=100.0))
        comps = instantiate_network(net, 4)
        res = sqp_solve(DDProblem(comps=comps, ports=net.ports,
                                  formulation=NEW, control_bases=ctrl_bases))
        assert res.converged
        assert len(res.log) <= 10


# ---------------------------------------------------------------------------
# 9. rank of the condensed control sensitivity

class TestCondensedRank:
    N_T = 2 * 2 + 1

    def _random_net(self, rng):
        cfg = chain_config(2, Re=float(rng.uniform(50, 150)),
                           h_c=float(rng.uniform(0.1, 0.3)))
        net = build_network(cfg)
        return net, instantiate_network(net, 2)

    def _random_controls(self, rng, ports, m):
        S = port_control_norm_matrix(self.N_T, "h1")
        return {p.index: orthonormalize(
            rng.standard_normal((3 * self.N_T, m)), S) for p in ports}

    def test_enrichment_restores_full_rank(self):
        m = 6
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            net, comps = self._random_net(rng)
            ctrl = self._random_controls(rng, net.ports, m)
            problem = DDProblem(comps=comps, ports=net.ports,
                                formulation=NEW, control_bases=ctrl)
            setup = RomSetup()
            for comp in comps:
                w = solve_local(comp, None)
                Z = orthonormalize((w - comp.lift)[:, None], comp.X)
                pb = {pi: ctrl[pi] for pi in comp.couplings}
                Z = enrich_trial_space(comp, Z, pb, [w], m)
                setup.state_bases[comp.index] = Z
                setup.modes[comp.index] = "minres"
            G = condensed_sensitivity(problem, setup)
            sv = np.linalg.svd(G, compute_uv=False)
            assert sv[-1] / sv[0] > 1e-10

    def test_disjoint_random_bases_are_rank_deficient(self):
        rng = np.random.default_rng(4)
        net, comps = self._random_net(rng)
        ctrl = self._random_controls(rng, net.ports, 6)
        problem = DDProblem(comps=comps, ports=net.ports,
                            formulation=NEW, control_bases=ctrl)
        setup = RomSetup()
        for comp in comps:
            # a single random trial mode cannot span the control response
            setup.state_bases[comp.index] = orthonormalize(
                rng.standard_normal((comp.n_dofs, 1)), comp.X)
            setup.modes[comp.index] = "minres"
        with pytest.raises(RankDeficiencyError):
            rom_dd_solve(problem, setup)


# ---------------------------------------------------------------------------
# 12. numerical hygiene

class TestHygiene:
    def test_jacobian_fd(self):
        space = make_space(ArchetypeLabel.INFLOW_JUNCTION, 2)
        comp = FlowComponent(space=space, coords=space.mesh.nodes.copy(),
                             nu=0.01, label=ArchetypeLabel.INFLOW_JUNCTION,
                             mu=GeomParams())
        comp.lift = reference_lift(ArchetypeLabel.INFLOW_JUNCTION, 2, 100.0)
        rng = np.random.default_rng(8)
        w = comp.lift + 0.05 * rng.standard_normal(comp.n_dofs)
        R, J = assemble(comp, w)
        tau = frozen_tau_at(comp, w)
        v = rng.standard_normal(comp.n_dofs)
        eps = 1e-6
        Rp, _ = assemble(comp, w + eps * v, need_jac=False, frozen_tau=tau)
        Rm, _ = assemble(comp, w - eps * v, need_jac=False, frozen_tau=tau)
        fd = (Rp - Rm) / (2 * eps)
        assert np.linalg.norm(fd - J @ v) / np.linalg.norm(J @ v) < 1e-5

    def test_pod_matches_dense_eigensolver(self):
        rng = np.random.default_rng(9)
        S = rng.standard_normal((40, 12))
        basis = pod(S, np.eye(40), 8)
        lam, U = np.linalg.eigh(S @ S.T)
        lam, U = lam[::-1], U[:, ::-1]
        assert np.allclose(basis.eigvals, lam[:8], rtol=1e-10, atol=1e-12)
        for j in range(8):
            assert abs(abs(U[:, j] @ basis.V[:, j]) - 1.0) < 1e-10

    def test_norm_matrices_spd(self):
        for label in (ArchetypeLabel.CHANNEL, ArchetypeLabel.JUNCTION):
            space = make_space(label, 2)
            from compflow.mesh import assemble_norms
            X, S = assemble_norms(space)
            Xd = X.toarray()
            assert np.allclose(Xd, Xd.T, atol=1e-12)
            assert np.linalg.eigvalsh(Xd).min() > 0
            assert np.linalg.eigvalsh(S).min() > 0

    def test_rotation_group_identities(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            a, b = rng.uniform(-math.pi, math.pi, 2)
            assert np.allclose(rot2(a) @ rot2(b), rot2(a + b), atol=1e-14)
            assert np.allclose(rot2(a) @ rot2(-a), np.eye(2), atol=1e-14)
        w = rng.standard_normal(30)
        assert np.allclose(rotate_state(rotate_state(w, 0.3, 10), -0.3, 10),
                           w, atol=1e-14)

    def test_jump_of_continuous_field_is_zero(self, branching_re100):
        # the monolithic solution is single-valued on every port, so the two
        # one-sided traces agree to round-off
        net, comps, mono = branching_re100
        for p in net.ports:
            tu = comps[p.up[0]].trace_values(mono[p.up[0]], p.index)
            td = comps[p.down[0]].trace_values(mono[p.down[0]], p.index)
            assert np.abs(tu - td).max() <= 1e-13

    def test_deterministic_csv(self, tmp_path):
        from compflow.cli import main
        from compflow.io import save_config
        cfg_path = tmp_path / "chain.json"
        save_config(chain_config(2, Re=50.0), cfg_path)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["solve-dd", "--config", str(cfg_path), "--res", "2",
                         "--out", str(out)]) == 0
            outs.append(out)
        for f in ("convergence.csv", "jumps.csv", "port_000.csv"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()

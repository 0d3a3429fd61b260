"""Boundary sampling, pairwise port training and state training (small scale)."""

import numpy as np
import pytest

from compflow.geometry import ArchetypeLabel
from compflow.mesh import make_space, segment_matrices_1d
from compflow.ddopt import port_control_norm_matrix
from compflow.rom import ReducedBasis
from compflow.training import (BoundarySampler, InletSample, MarkingPolicy,
                               evaluate_test_set, localized_state_training,
                               make_test_set, pairwise_port_training,
                               port_based_state_enrichment, sample_inlet,
                               sample_outflux, zero_flowrate_poly)


@pytest.fixture(scope="module")
def sampler():
    return BoundarySampler()


class TestBoundarySampling:
    def test_zero_flowrate_property(self):
        # the perturbation polynomials carry no net flux, so every sampled
        # inflow profile has unit reference flowrate
        y = np.linspace(-1, 1, 200001)
        for k in range(1, 7):
            v = zero_flowrate_poly(k, y)
            assert np.trapezoid(v, y) == pytest.approx(0.0, abs=1e-8)

    def test_inlet_positive_and_unit_flowrate(self, sampler, rng):
        y = np.linspace(0, 1, 4001)
        for _ in range(10):
            s = sample_inlet(sampler, rng)
            prof = s.profile(y)
            assert prof[1:-1].min() > 0
            assert np.trapezoid(prof, y) == pytest.approx(2.0 / 3.0, abs=1e-5)
            assert sampler.Re_range[0] <= s.Re <= sampler.Re_range[1]

    def test_inlet_amplitude_reduction(self, sampler):
        # adversarial coefficients force the halving loop to engage
        s = InletSample(Re=100.0, coeffs=np.full(6, 30.0), delta_u=0.5)
        y = np.linspace(0, 1, 101)[1:-1]
        assert s.profile(y).min() < 0  # raw amplitude is infeasible
        rng = np.random.default_rng(0)
        smp = BoundarySampler(delta_u=50.0)
        out = sample_inlet(smp, rng)
        assert out.profile(y).min() > 0
        assert out.delta_u < 50.0

    def test_outflux_range(self, sampler, rng):
        xi = np.linspace(0, 1, 101)
        for _ in range(5):
            g = sample_outflux(sampler, rng)
            assert sampler.g0_range[0] <= g.g0 <= sampler.g0_range[1]
            assert np.all(np.isfinite(g.values(xi)))


@pytest.fixture(scope="module")
def tiny_ports():
    rng = np.random.default_rng(11)
    sampler = BoundarySampler()
    return pairwise_port_training(rng, sampler, n_loc_s=3, m0=6, res=2), rng, sampler


class TestPairwisePortTraining:
    def test_basis_shape_and_norm(self, tiny_ports):
        W, _, _ = tiny_ports
        n_t = 2 * 2 + 1
        assert isinstance(W, ReducedBasis)
        assert W.V.shape[0] == 3 * n_t
        assert 0 < W.dim <= 6
        S = port_control_norm_matrix(n_t, "h1")
        G = W.V.T @ S @ W.V
        assert np.allclose(G, np.eye(W.dim), atol=1e-8)

    def test_provenance(self, tiny_ports):
        W, _, _ = tiny_ports
        assert W.provenance["n_snapshots"] > 0
        assert W.provenance["n_samples"] >= W.provenance["n_snapshots"] // 2


@pytest.fixture(scope="module")
def tiny_states(tiny_ports):
    W, _, sampler = tiny_ports
    rng = np.random.default_rng(12)
    Z, data = localized_state_training(W, rng, sampler, n_networks=3,
                                       n_comp_max=3, n0=4, res=2)
    return W, Z, data


class TestStateTraining:
    def test_archetype_bases(self, tiny_states):
        W, Z, data = tiny_states
        assert set(Z) <= set(ArchetypeLabel)
        for label, basis in Z.items():
            space = make_space(label, 2)
            assert basis.V.shape[0] == space.n_dofs
            assert basis.dim >= 1
            # X-orthonormal columns
            from compflow.mesh import assemble_norms
            X, _ = assemble_norms(space)
            G = basis.V.T @ (X @ basis.V)
            assert np.allclose(G, np.eye(basis.dim), atol=1e-8)

    def test_snapshots_are_homogeneous(self, tiny_states):
        # stored snapshots have the lift removed: zero on Dirichlet dofs
        _, Z, data = tiny_states
        for label, snaps in data.homogeneous.items():
            space = make_space(label, 2)
            for w in snaps:
                assert np.abs(w[space.dirichlet_dofs]).max() < 1e-10

    def test_port_based_enrichment_grows(self, tiny_states):
        W, Z, data = tiny_states
        Z2 = port_based_state_enrichment(Z, W, data, res=2, n_new=2)
        for label in Z:
            assert Z2[label].dim >= Z[label].dim
            # hierarchical: the old modes are a prefix of the new basis
            assert np.allclose(Z2[label].V[:, :Z[label].dim], Z[label].V)
        assert any(Z2[l].dim > Z[l].dim for l in Z)


def test_marking_policy_validation():
    with pytest.raises(ValueError):
        MarkingPolicy(m_w=0)


def test_make_test_set_structure():
    rng = np.random.default_rng(13)
    ts = make_test_set(rng, 2, 2, res=2)
    assert len(ts) == 2
    net, comps, states = ts[0]
    assert len(comps) == 2 and len(states) == 2
    assert all(np.all(np.isfinite(w)) for w in states)


def test_evaluate_test_set_with_perfect_bases():
    # hand-built test tuple on the straight chain; with the reference state
    # in every trial space the reduced solve must reproduce it
    from compflow.geometry import build_network, chain_config
    from compflow.fem import instantiate_network
    from compflow.ddopt import DDProblem, sqp_solve
    from compflow.rom import orthonormalize, enrich_trial_space

    net = build_network(chain_config(2, Re=50.0))
    comps = instantiate_network(net, 2)
    ref = sqp_solve(DDProblem(comps=comps, ports=net.ports))
    ts = [(net, comps, ref.states)]
    Z = {}
    for c, w in zip(comps, ref.states):
        V = orthonormalize((w - c.lift)[:, None], c.X)
        pb = {pi: np.eye(3 * cp.n_t) for pi, cp in c.couplings.items()}
        V = enrich_trial_space(c, V, pb, [w], 10)
        Z[c.label] = ReducedBasis(V=V, tag=c.label.value)
    n_t = 2 * 2 + 1
    W_full = ReducedBasis(V=np.eye(3 * n_t), tag="ports")
    out = evaluate_test_set(ts, W_full, Z, mode="minres")
    assert out["failed"] == 0
    assert out["median"] < 1e-6

"""Archetype geometry, parameter validation and network assembly."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compflow.geometry import (ALPHA_MAX, H_C_MAX, ArchetypeLabel,
                               GeometryMismatchError, GeomParams, NetworkConfig,
                               ParameterDomainError, attach_downstream,
                               branch_direction, branching_config,
                               build_network, chain_config,
                               instantiate_component, port_endpoints,
                               port_groups, port_normal_angle,
                               random_tree_config, rot2, rotation_matrix)


angles = st.floats(-10.0, 10.0, allow_nan=False)


@given(angles)
def test_rot2_orthogonal(theta):
    R = rot2(theta)
    assert np.allclose(R.T @ R, np.eye(2), atol=1e-14)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-14)


@given(angles, angles)
@settings(max_examples=30)
def test_rot2_composition(a, b):
    assert np.allclose(rot2(a) @ rot2(b), rot2(a + b), atol=1e-12)


def test_rotation_matrix_fixes_pressure():
    A = rotation_matrix(0.7)
    assert A[2, 2] == 1.0
    assert np.all(A[2, :2] == 0.0) and np.all(A[:2, 2] == 0.0)
    assert np.allclose(A[:2, :2], rot2(0.7))


def test_branch_direction_unit():
    for alpha in (0.0, math.pi / 8, math.pi / 6):
        d = branch_direction(alpha)
        assert np.linalg.norm(d) == pytest.approx(1.0)
    assert np.allclose(branch_direction(0.0), [0.0, 1.0])


class TestValidation:
    def test_gamma_positive(self):
        with pytest.raises(ParameterDomainError):
            GeomParams(gamma=0.0).validate(ArchetypeLabel.CHANNEL)
        with pytest.raises(ParameterDomainError):
            GeomParams(gamma=-1.0).validate(ArchetypeLabel.JUNCTION)

    def test_channel_rejects_alpha(self):
        with pytest.raises(ParameterDomainError):
            GeomParams(alpha=0.3).validate(ArchetypeLabel.CHANNEL)

    def test_junction_rejects_h_c(self):
        with pytest.raises(ParameterDomainError):
            GeomParams(h_c=0.2).validate(ArchetypeLabel.JUNCTION)

    def test_ranges(self):
        GeomParams(h_c=H_C_MAX).validate(ArchetypeLabel.CHANNEL)
        GeomParams(alpha=ALPHA_MAX).validate(ArchetypeLabel.JUNCTION)
        with pytest.raises(ParameterDomainError):
            GeomParams(h_c=H_C_MAX + 1e-6).validate(ArchetypeLabel.CHANNEL)
        with pytest.raises(ParameterDomainError):
            GeomParams(alpha=-0.01).validate(ArchetypeLabel.JUNCTION)
        with pytest.raises(ParameterDomainError):
            instantiate_component(ArchetypeLabel.JUNCTION,
                                  GeomParams(alpha=ALPHA_MAX + 0.1))


class TestComponentMap:
    def test_identity_on_reference(self):
        phi = instantiate_component(ArchetypeLabel.CHANNEL, GeomParams())
        pts = np.array([[0.0, 0.0], [3.0, 1.0], [1.5, 0.5]])
        assert np.allclose(phi(pts), pts)

    def test_similarity_composition(self):
        # deform -> scale -> rotate -> translate, in that order
        mu = GeomParams(gamma=2.0, theta=0.3, shift=(1.0, -2.0), h_c=0.2)
        phi = instantiate_component(ArchetypeLabel.CHANNEL, mu)
        pts = np.array([[0.7, 0.4]])
        ref = instantiate_component(ArchetypeLabel.CHANNEL,
                                    GeomParams(h_c=0.2))(pts)
        expect = 2.0 * ref @ rot2(0.3).T + np.array([1.0, -2.0])
        assert np.allclose(phi(pts), expect)

    def test_bump_leaves_ports_and_top_untouched(self):
        phi = instantiate_component(ArchetypeLabel.CHANNEL, GeomParams(h_c=0.3))
        ends = np.array([[0.0, 0.0], [0.0, 1.0], [3.0, 0.0], [3.0, 1.0]])
        assert np.allclose(phi(ends), ends)
        top = np.array([[1.5, 1.0]])
        assert np.allclose(phi(top), top)
        # interior bottom dips below y = 0
        assert phi(np.array([[1.5, 0.0]]))[0, 1] < -0.2

    def test_branch_inclination(self):
        alpha = math.pi / 6
        phi = instantiate_component(ArchetypeLabel.JUNCTION,
                                    GeomParams(alpha=alpha))
        ep = port_endpoints(ArchetypeLabel.JUNCTION, GeomParams(alpha=alpha), 7)
        mid = ep.mean(axis=0)
        base = np.array([1.5, 1.0])
        d = (mid - base) / np.linalg.norm(mid - base)
        assert np.allclose(d, branch_direction(alpha), atol=1e-12)
        ang = port_normal_angle(ArchetypeLabel.JUNCTION,
                                GeomParams(alpha=alpha), 7)
        assert ang == pytest.approx(math.pi / 2 - alpha)


def test_port_length_scales_with_gamma():
    for label in (ArchetypeLabel.CHANNEL, ArchetypeLabel.JUNCTION):
        for g in port_groups(label):
            ep = port_endpoints(label, GeomParams(gamma=1.7, alpha=0.3)
                                if label.is_junction
                                else GeomParams(gamma=1.7), g)
            assert np.linalg.norm(ep[1] - ep[0]) == pytest.approx(1.7)


class TestNetworks:
    def test_chain(self):
        net = build_network(chain_config(3, Re=80.0))
        assert net.n_components == 3
        assert len(net.ports) == 2
        assert net.Re == 80.0
        assert net.free_outlets == [(2, 2)]
        for p in net.ports:
            assert p.down[1] == 1
            assert p.sign(p.up[0]) == -1 and p.sign(p.down[0]) == 1

    def test_branching(self):
        net = build_network(branching_config())
        labels = [net.label(i) for i in range(4)]
        assert labels[0] is ArchetypeLabel.INFLOW_CHANNEL
        assert labels[1] is ArchetypeLabel.JUNCTION
        assert len(net.ports) == 3
        assert len(net.free_outlets) == 2

    def test_attach_downstream_glues_endpoints(self):
        mu0 = GeomParams(h_c=0.15)
        mu1 = attach_downstream(ArchetypeLabel.INFLOW_CHANNEL, mu0, 2,
                                ArchetypeLabel.JUNCTION, alpha=0.4)
        ep_out = port_endpoints(ArchetypeLabel.INFLOW_CHANNEL, mu0, 2)
        ep_in = port_endpoints(ArchetypeLabel.JUNCTION, mu1, 1)
        assert (np.allclose(ep_out, ep_in, atol=1e-12)
                or np.allclose(ep_out, ep_in[::-1], atol=1e-12))

    def test_needs_exactly_one_inflow(self):
        cfg = chain_config(2)
        cfg.components[0] = (ArchetypeLabel.CHANNEL, cfg.components[0][1])
        with pytest.raises(GeometryMismatchError):
            build_network(cfg)

    def test_rejects_non_coincident_ports(self):
        cfg = chain_config(2)
        lab, mu = cfg.components[1]
        cfg.components[1] = (lab, GeomParams(shift=(mu.shift[0] + 0.5, 0.0)))
        with pytest.raises(GeometryMismatchError):
            build_network(cfg)

    def test_rejects_double_connection(self):
        cfg = chain_config(3)
        cfg.connections.append(cfg.connections[0])
        with pytest.raises(GeometryMismatchError):
            build_network(cfg)

    def test_random_tree_reproducible(self):
        c1 = random_tree_config(np.random.default_rng(7), 5)
        c2 = random_tree_config(np.random.default_rng(7), 5)
        assert c1.to_dict() == c2.to_dict()
        net = build_network(c1)
        assert net.n_components == 5

    def test_random_tree_junction_root(self):
        cfg = random_tree_config(np.random.default_rng(3), 4,
                                 root=ArchetypeLabel.INFLOW_JUNCTION)
        assert cfg.components[0][0] is ArchetypeLabel.INFLOW_JUNCTION
        build_network(cfg)

    def test_config_roundtrip(self):
        cfg = branching_config(Re=120.0)
        again = NetworkConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

"""Offline training pipeline for the component reduced-order models.

Three stages: pairwise port training (two-component solves over all
connection types produce a shared control basis), localized state
training (random small networks solved with full-order states and
reduced controls produce per-archetype state bases), and an adaptive
enrichment loop that marks the worst components/ports of sampled global
configurations, harvests local high-fidelity snapshots and appends
hierarchical POD modes.

All randomness flows through a single numpy Generator, so a fixed master
seed makes the whole pipeline deterministic; sample solves run serially
in sampling order.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import eval_legendre

from .geometry import (
    ArchetypeLabel,
    GeomParams,
    Network,
    NetworkConfig,
    attach_downstream,
    build_network,
    instantiate_component,
    outlet_groups,
    port_endpoints,
    port_groups,
    port_normal_angle,
    random_tree_config,
)
from .geometry import Port
from .mesh import port_trace
from .fem import (
    FlowComponent,
    SolverError,
    _cached_space,
    _coupling_for,
    instantiate_network,
    reference_lift,
    rotate_state,
    set_outflux,
    solve_local,
)
from .ddopt import (
    DDProblem,
    GNMDivergenceError,
    NEW,
    jump_norms,
    port_control_norm_matrix,
    sqp_solve,
)
from .rom import (
    RankDeficiencyError,
    ReducedBasis,
    ReducedSolveError,
    RomSetup,
    append_orthogonal_modes,
    enrichment_columns,
    instantiate_state_basis,
    pod,
    rom_dd_solve,
    rotate_control_basis,
)

REVERSE_FLOW_TOL = 1e-10
MAX_OUTFLUX_ATTEMPTS = 5


class TrainingError(RuntimeError):
    """Too many sample solves failed to produce a usable dataset."""


# ---------------------------------------------------------------------------
# boundary-condition sampling

@dataclass
class BoundarySampler:
    """Random boundary data for training solves.

    ``R`` is the polynomial order of the perturbations, ``delta_u`` and
    ``delta_g`` the initial perturbation amplitudes (reduced per sample
    until the inflow is positive / the outflow has no reverse flow).
    """

    R: int = 6
    delta_u: float = 0.5
    delta_g: float = 0.1
    Re_range: tuple[float, float] = (50.0, 150.0)
    g0_range: tuple[float, float] = (-0.2, 0.0)
    Re_ref: float = 100.0


def zero_flowrate_poly(k: int, y: np.ndarray) -> np.ndarray:
    """P_k on (-1, 1): weighted polynomials with zero net flowrate."""
    y = np.asarray(y, float)
    w = 1.0 - y**2
    if k == 1:
        return w * y
    if k == 2:
        return w * (5.0 * y**2 - 1.0)
    return w * eval_legendre(k, y)


@dataclass
class InletSample:
    Re: float
    coeffs: np.ndarray
    delta_u: float

    def profile(self, y: np.ndarray) -> np.ndarray:
        """Reference-magnitude inflow profile on (0, 1) (Re factor excluded)."""
        y = np.asarray(y, float)
        out = 4.0 * y * (1.0 - y)
        for k, c in enumerate(self.coeffs, start=1):
            out = out + self.delta_u * c / k**2 * zero_flowrate_poly(k, 2.0 * y - 1.0)
        return out


def sample_inlet(sampler: BoundarySampler, rng: np.random.Generator,
                 Re: float | None = None) -> InletSample:
    """Random positive inflow profile; delta_u is halved until positive."""
    if Re is None:
        Re = float(rng.uniform(*sampler.Re_range))
    c = rng.standard_normal(sampler.R)
    grid = np.linspace(0.0, 1.0, 101)[1:-1]
    du = sampler.delta_u
    for _ in range(60):
        trial = InletSample(Re=Re, coeffs=c, delta_u=du)
        if trial.profile(grid).min() > 0.0:
            return trial
        du *= 0.5
    return InletSample(Re=Re, coeffs=c, delta_u=0.0)


@dataclass
class OutfluxSample:
    g0: float
    coeffs: np.ndarray
    delta_g: float

    def values(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, float)
        out = np.full_like(xi, self.g0)
        for k, c in enumerate(self.coeffs, start=1):
            out = out + self.delta_g * c * eval_legendre(k, 2.0 * xi - 1.0)
        return out


def sample_outflux(sampler: BoundarySampler, rng: np.random.Generator) -> OutfluxSample:
    return OutfluxSample(
        g0=float(rng.uniform(*sampler.g0_range)),
        coeffs=rng.standard_normal(sampler.R),
        delta_g=sampler.delta_g,
    )


def apply_outflux(comp: FlowComponent, group: int, sample: OutfluxSample) -> None:
    """Add the sampled traction g(xi) * n on a free outlet."""
    tq = port_trace(comp.space, group)
    phi = port_normal_angle(comp.label, comp.mu, group)
    xi = np.linspace(0.0, 1.0, len(tq.nodes))
    g = sample.values(xi)
    gvals = np.concatenate([g * math.cos(phi), g * math.sin(phi)])
    set_outflux(comp, group, gvals)


def outlet_min_normal_velocity(comp: FlowComponent, group: int,
                               w: np.ndarray) -> float:
    tq = port_trace(comp.space, group)
    phi = port_normal_angle(comp.label, comp.mu, group)
    nn = comp.n_nodes
    un = math.cos(phi) * w[tq.nodes] + math.sin(phi) * w[nn + tq.nodes]
    return float(un.min())


# ---------------------------------------------------------------------------
# shared network solve with sampled boundary data

def _set_sampled_inlet(comps: list[FlowComponent], net: Network, res: int,
                       inlet: InletSample, Re_ref: float) -> None:
    i = next(k for k in range(net.n_components) if net.label(k).is_inflow)
    lab = net.label(i)
    lift_ref = reference_lift(lab, res, Re_ref, inlet_profile=inlet.profile)
    comps[i].lift = (inlet.Re / Re_ref) * rotate_state(
        lift_ref, net.mu(i).theta, comps[i].n_nodes)


def solve_network_sampled(
    net: Network,
    comps: list[FlowComponent],
    res: int,
    rng: np.random.Generator,
    sampler: BoundarySampler,
    control_bases: dict[int, np.ndarray] | None = None,
    delta: float = 1e-8,
    tol: float = 1e-8,
):
    """FOM DD solve with random inflow/outflow boundary data.

    The outflux amplitude is halved and the network re-solved while any
    free outlet shows reverse flow; returns (result, problem) or None if
    the sample stays infeasible at delta_g = 0.
    """
    inlet = sample_inlet(sampler, rng, Re=net.Re)
    _set_sampled_inlet(comps, net, res, inlet, net.Re_ref)
    outflux = {fo: sample_outflux(sampler, rng) for fo in net.free_outlets}
    base_neumann = [c.neumann.copy() for c in comps]
    for attempt in range(MAX_OUTFLUX_ATTEMPTS + 1):
        for c, b in zip(comps, base_neumann):
            c.neumann = b.copy()
        for (i, g), s in outflux.items():
            apply_outflux(comps[i], g, s)
        problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                            delta=delta, control_bases=control_bases)
        result = sqp_solve(problem, tol=tol)
        bad = [
            fo for fo in net.free_outlets
            if outlet_min_normal_velocity(comps[fo[0]], fo[1],
                                          result.states[fo[0]]) < -REVERSE_FLOW_TOL
        ]
        if not bad:
            return result, problem
        for fo in bad:
            s = outflux[fo]
            outflux[fo] = dataclasses.replace(
                s, delta_g=0.0 if attempt >= MAX_OUTFLUX_ATTEMPTS - 1
                else 0.5 * s.delta_g)
    return None


# ---------------------------------------------------------------------------
# pairwise port training

CONNECTION_TYPES = (
    ("channel", "channel"),
    ("channel", "junction"),
    ("junction", "channel"),
    ("junction", "junction"),
)


def _sample_mu_args(kind: str, rng: np.random.Generator) -> dict:
    if kind == "channel":
        return {"h_c": float(rng.uniform(0.1, 0.3))}
    return {"alpha": float(rng.uniform(math.pi / 8, math.pi / 6))}


def pair_config(conn: tuple[str, str], rng: np.random.Generator,
                sampler: BoundarySampler) -> NetworkConfig:
    """Random two-component configuration of the given connection type."""
    up_kind, down_kind = conn
    lab_up = (ArchetypeLabel.INFLOW_CHANNEL if up_kind == "channel"
              else ArchetypeLabel.INFLOW_JUNCTION)
    lab_down = (ArchetypeLabel.CHANNEL if down_kind == "channel"
                else ArchetypeLabel.JUNCTION)
    mu_up = GeomParams(**_sample_mu_args(up_kind, rng))
    outs = outlet_groups(lab_up)
    port_up = int(outs[rng.integers(len(outs))])
    mu_down = attach_downstream(lab_up, mu_up, port_up, lab_down,
                                **_sample_mu_args(down_kind, rng))
    return NetworkConfig(
        components=[(lab_up, mu_up), (lab_down, mu_down)],
        connections=[(0, port_up, 1, 1)],
        Re=float(rng.uniform(*sampler.Re_range)),
        Re_ref=sampler.Re_ref,
    )


def pairwise_port_training(
    rng: np.random.Generator,
    sampler: BoundarySampler | None = None,
    n_loc_s: int = 15,
    m0: int = 10,
    res: int = 2,
    delta: float = 1e-8,
) -> ReducedBasis:
    """Control basis from two-component solves over all connection types.

    Each sample draws a geometry, Reynolds number and boundary data,
    solves the pair with the full control space, and pools the port
    control rotated into the reference frame; POD under the port norm
    compresses the pool to m0 modes.
    """
    sampler = sampler or BoundarySampler()
    snaps, n_fail, n_total = [], 0, 0
    for conn in CONNECTION_TYPES:
        for _ in range(n_loc_s):
            n_total += 1
            cfg = pair_config(conn, rng, sampler)
            try:
                net = build_network(cfg)
                comps = instantiate_network(net, res)
                out = solve_network_sampled(net, comps, res, rng, sampler,
                                            delta=delta)
            except (SolverError, GNMDivergenceError) as exc:
                warnings.warn(f"pair sample failed: {exc}", stacklevel=2)
                out = None
            if out is None:
                n_fail += 1
                continue
            result, problem = out
            for p in net.ports:
                s_port = result.s[problem.layout.slices[p.index]]
                snaps.append(rotate_control_basis(s_port, -p.omega))
    if n_fail > n_total // 2:
        raise TrainingError(
            f"{n_fail} of {n_total} pairwise samples failed")
    S = port_control_norm_matrix(len(snaps[0]) // 3, "h1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        basis = pod(np.column_stack(snaps), S, m0, tag="port-control")
    basis.provenance.update(n_samples=n_total, n_failed=n_fail)
    return basis


# ---------------------------------------------------------------------------
# localized state training

@dataclass
class StateDatasets:
    """Reference-frame training snapshots per archetype.

    ``homogeneous`` holds lift-subtracted, de-rotated states (the POD
    input); ``full`` holds the matching full reference states with their
    deformation parameters and Reynolds numbers (used by the port-based
    trial enrichment and the test-space construction).
    """

    homogeneous: dict[ArchetypeLabel, list[np.ndarray]] = field(default_factory=dict)
    full: dict[ArchetypeLabel, list[tuple[GeomParams, float, np.ndarray]]] = \
        field(default_factory=dict)

    def add(self, comp: FlowComponent, w: np.ndarray, Re: float) -> None:
        nn = comp.n_nodes
        homog = rotate_state(w - comp.lift, -comp.mu.theta, nn)
        full = rotate_state(w, -comp.mu.theta, nn)
        mu_ref = GeomParams(alpha=comp.mu.alpha, h_c=comp.mu.h_c)
        self.homogeneous.setdefault(comp.label, []).append(homog)
        self.full.setdefault(comp.label, []).append((mu_ref, Re, full))


def _coverage_configs(rng: np.random.Generator,
                      sampler: BoundarySampler) -> list[NetworkConfig]:
    """Two fixed-topology networks covering all four archetypes."""
    out = []
    # inflow channel -> junction -> two channels
    lab0 = ArchetypeLabel.INFLOW_CHANNEL
    mu0 = GeomParams(**_sample_mu_args("channel", rng))
    mu1 = attach_downstream(lab0, mu0, 2, ArchetypeLabel.JUNCTION,
                            **_sample_mu_args("junction", rng))
    mu2 = attach_downstream(ArchetypeLabel.JUNCTION, mu1, 4,
                            ArchetypeLabel.CHANNEL,
                            **_sample_mu_args("channel", rng))
    mu3 = attach_downstream(ArchetypeLabel.JUNCTION, mu1, 7,
                            ArchetypeLabel.CHANNEL,
                            **_sample_mu_args("channel", rng))
    out.append(NetworkConfig(
        components=[(lab0, mu0), (ArchetypeLabel.JUNCTION, mu1),
                    (ArchetypeLabel.CHANNEL, mu2), (ArchetypeLabel.CHANNEL, mu3)],
        connections=[(0, 2, 1, 1), (1, 4, 2, 1), (1, 7, 3, 1)],
        Re=float(rng.uniform(*sampler.Re_range)), Re_ref=sampler.Re_ref))
    # inflow junction -> two channels
    labj = ArchetypeLabel.INFLOW_JUNCTION
    muj = GeomParams(**_sample_mu_args("junction", rng))
    mua = attach_downstream(labj, muj, 4, ArchetypeLabel.CHANNEL,
                            **_sample_mu_args("channel", rng))
    mub = attach_downstream(labj, muj, 7, ArchetypeLabel.CHANNEL,
                            **_sample_mu_args("channel", rng))
    out.append(NetworkConfig(
        components=[(labj, muj), (ArchetypeLabel.CHANNEL, mua),
                    (ArchetypeLabel.CHANNEL, mub)],
        connections=[(0, 4, 1, 1), (0, 7, 2, 1)],
        Re=float(rng.uniform(*sampler.Re_range)), Re_ref=sampler.Re_ref))
    return out


def localized_state_training(
    W: ReducedBasis,
    rng: np.random.Generator,
    sampler: BoundarySampler | None = None,
    n_networks: int = 8,
    n_comp_max: int = 4,
    n0: int = 10,
    res: int = 2,
    delta: float = 1e-8,
) -> tuple[dict[ArchetypeLabel, ReducedBasis], StateDatasets]:
    """State bases from random networks solved with reduced controls.

    Samples networks of up to ``n_comp_max`` components, solves the DD
    problem with full-order states and the reduced control basis W, maps
    states to the component reference frames (rotate back, subtract the
    lift) and compresses per archetype to n0 modes under the reference
    norm.
    """
    sampler = sampler or BoundarySampler()
    data = StateDatasets()
    n_fail = 0
    configs = _coverage_configs(rng, sampler)
    while len(configs) < n_networks:
        n_c = int(rng.integers(2, n_comp_max + 1))
        # every third network grows from an inflow junction so that the
        # rarer inflow archetype is sampled as well
        root = (ArchetypeLabel.INFLOW_JUNCTION if len(configs) % 3 == 2
                else ArchetypeLabel.INFLOW_CHANNEL)
        configs.append(random_tree_config(rng, n_c, Re_range=sampler.Re_range,
                                          Re_ref=sampler.Re_ref, root=root))
    for cfg in configs:
        try:
            net = build_network(cfg)
            comps = instantiate_network(net, res)
            bases = {p.index: rotate_control_basis(W.V, p.omega)
                     for p in net.ports}
            out = solve_network_sampled(net, comps, res, rng, sampler,
                                        control_bases=bases, delta=delta)
        except (SolverError, GNMDivergenceError) as exc:
            warnings.warn(f"state-training network failed: {exc}", stacklevel=2)
            out = None
        if out is None:
            n_fail += 1
            continue
        result, _ = out
        for comp, w in zip(comps, result.states):
            data.add(comp, w, cfg.Re)
    if n_fail > n_networks // 2:
        raise TrainingError(f"{n_fail} of {n_networks} training networks failed")
    bases = {}
    for label, cols in data.homogeneous.items():
        X = _cached_space(label, res)[1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            bases[label] = pod(np.column_stack(cols), X, n0,
                               tag=f"state-{label.value}")
        bases[label].provenance.update(n_snapshots=len(cols), n_failed=n_fail)
    return bases, data


# ---------------------------------------------------------------------------
# archetype components and port-based state enrichment

def archetype_component(label: ArchetypeLabel, res: int, Re: float,
                        mu: GeomParams | None = None,
                        Re_ref: float = 100.0) -> FlowComponent:
    """Reference-frame component with couplings on every port group.

    Used for trial-space enrichment and fully local training solves; the
    deformation parameters of ``mu`` are kept, rotation/shift/scale are
    reset to the reference frame.
    """
    space, X, S = _cached_space(label, res)
    mu_ref = GeomParams(alpha=getattr(mu, "alpha", None) if mu else None,
                        h_c=getattr(mu, "h_c", None) if mu else None)
    coords = instantiate_component(label, mu_ref)(space.mesh.nodes)
    lift = ((Re / Re_ref) * reference_lift(label, res, Re_ref)
            if label.is_inflow else None)
    comp = FlowComponent(space=space, coords=coords, nu=1.0 / Re_ref,
                         lift=lift, label=label, mu=mu_ref, X=X, S_port=S)
    for g in port_groups(label):
        ep = port_endpoints(label, mu_ref, g)
        is_outlet = g in outlet_groups(label)
        port = Port(index=g,
                    up=(0, g) if is_outlet else (-1, g),
                    down=(-1, g) if is_outlet else (0, g),
                    endpoints=ep,
                    omega=port_normal_angle(label, mu_ref, g),
                    length=float(np.linalg.norm(ep[1] - ep[0])),
                    flip_down=False)
        comp.couplings[g] = _coupling_for(space, port, 0)
    return comp


def port_based_state_enrichment(
    Z: dict[ArchetypeLabel, ReducedBasis],
    W: ReducedBasis,
    data: StateDatasets,
    res: int,
    n_new: int,
    max_states: int = 3,
    new_port_modes: np.ndarray | None = None,
) -> dict[ArchetypeLabel, ReducedBasis]:
    """Enrich every archetype state basis with port-sensitivity modes.

    For a few stored training states per archetype, solves the linearized
    local problem driven by each (new) control mode on each port of the
    archetype and appends the orthogonal-complement POD modes.
    """
    out = {}
    for label, basis in Z.items():
        cols = []
        for mu, Re, w in data.full.get(label, [])[:max_states]:
            comp = archetype_component(label, res, Re, mu)
            modes = W.V if new_port_modes is None else new_port_modes
            pb = {g: rotate_control_basis(modes, comp.couplings[g].port.omega)
                  for g in comp.couplings}
            cols.append(enrichment_columns(comp, pb, [w]))
        X = _cached_space(label, res)[1]
        V = basis.V
        pool = [c for c in cols if c.shape[1]]
        if pool:
            V = append_orthogonal_modes(V, np.hstack(pool), X, n_new,
                                        tag="port-enrichment")
        out[label] = ReducedBasis(V=V, tag=basis.tag, eigvals=basis.eigvals,
                                  provenance=dict(basis.provenance,
                                                  enriched_to=V.shape[1]))
    return out


# ---------------------------------------------------------------------------
# adaptive enrichment (outer loop)

@dataclass
class MarkingPolicy:
    """Marking and growth parameters of the adaptive enrichment loop."""

    m_w: int = 1                  # components marked per archetype type
    m_s: int = 1                  # ports marked
    n_glo: int = 10               # state modes appended per iteration
    m_glo: int = 10               # control modes appended per iteration
    maxit: int = 2
    n_train_glo: int = 12         # sampled global configurations
    n_components: int = 6         # components per sampled network
    reenrich_ports: bool = False  # port-enrich states for new control modes
    n_port_glo: int = 6           # state modes appended per re-enrichment

    def __post_init__(self):
        if self.m_w < 1 or self.m_s < 1:
            raise ValueError("m_w and m_s must be at least 1")


@dataclass
class EnrichmentResult:
    W: ReducedBasis
    Z: dict[ArchetypeLabel, ReducedBasis]
    history: list[dict]


def _rom_setup_for(net: Network, comps: list[FlowComponent],
                   W: ReducedBasis, Z: dict[ArchetypeLabel, ReducedBasis],
                   mode: str) -> tuple[dict[int, np.ndarray], RomSetup]:
    control_bases = {p.index: rotate_control_basis(W.V, p.omega)
                     for p in net.ports}
    state_bases = {
        c.index: instantiate_state_basis(Z[c.label].V, c.mu.theta, c.n_nodes)
        for c in comps
    }
    setup = RomSetup(state_bases=state_bases,
                     modes={c.index: mode for c in comps})
    return control_bases, setup


def _expand_controls(problem: DDProblem, s: np.ndarray) -> dict[int, np.ndarray]:
    """Full-trace control per port from reduced coefficients."""
    lay = problem.layout
    return {p.index: lay.C[p.index] @ s[lay.slices[p.index]]
            for p in problem.ports}


def _extra_port_load(comp: FlowComponent, s_full: dict[int, np.ndarray],
                     skip: set[int]) -> np.ndarray:
    load = np.zeros(comp.n_dofs)
    for pi, c in comp.couplings.items():
        if pi not in skip and pi in s_full:
            load += c.E @ s_full[pi]
    return load


def _pair_port_sample(comps, ports, p, s_full, delta):
    """Two-owner FOM DD at a marked port, the other ports carrying s*."""
    pair = []
    for ci in (p.up[0], p.down[0]):
        comp = comps[ci]
        load = _extra_port_load(comp, s_full, skip={p.index})
        pair.append(dataclasses.replace(
            comp,
            neumann=comp.neumann + load,
            couplings={p.index: comp.couplings[p.index]},
        ))
    problem = DDProblem(comps=pair, ports=[p], formulation=NEW, delta=delta)
    return sqp_solve(problem), problem


def adaptive_enrichment(
    policy: MarkingPolicy,
    W: ReducedBasis,
    Z: dict[ArchetypeLabel, ReducedBasis],
    rng: np.random.Generator,
    res: int = 2,
    delta: float = 1e-8,
    mode: str = "minres",
    Re_range: tuple[float, float] = (50.0, 150.0),
    Re_ref: float = 100.0,
    test_set: list | None = None,
    data: StateDatasets | None = None,
) -> EnrichmentResult:
    """Greedy outer loop growing the control and state bases.

    Per iteration, every sampled configuration is solved with the current
    reduced model; the worst component of each archetype type and the
    worst-jump ports contribute local high-fidelity snapshots (two-owner
    port solves; hybrid solves on the first iteration, fully local solves
    with prescribed controls afterwards).  Hierarchical POD appends at
    most m_glo control / n_glo state modes per iteration.

    ``test_set`` entries are (network, components, reference states)
    triples; when given, per-component relative errors are recorded in
    the history before the loop and after every iteration.  When
    ``policy.reenrich_ports`` is set, ``data`` must hold stored training
    states; the state bases are then port-enriched for the control modes
    appended in each iteration.
    """
    norm_S = port_control_norm_matrix(W.V.shape[0] // 3, "h1")
    train = []
    for _ in range(policy.n_train_glo):
        cfg = random_tree_config(rng, policy.n_components,
                                 Re_range=Re_range, Re_ref=Re_ref)
        net = build_network(cfg)
        train.append((net, instantiate_network(net, res)))

    history = []

    def record(it, skipped=0):
        entry = {"iteration": it, "m": W.V.shape[1],
                 "n": {lab.value: b.V.shape[1] for lab, b in Z.items()},
                 "skipped": skipped}
        if test_set is not None:
            entry["test_errors"] = evaluate_test_set(test_set, W, Z,
                                                     delta=delta, mode=mode)
        history.append(entry)

    record(0)
    for it in range(1, policy.maxit + 1):
        d_state = {lab: [] for lab in Z}
        d_ctrl = []
        skipped = 0
        for net, comps in train:
            try:
                control_bases, setup = _rom_setup_for(net, comps, W, Z, mode)
                problem = DDProblem(comps=comps, ports=net.ports,
                                    formulation=NEW, delta=delta,
                                    control_bases=control_bases)
                result = rom_dd_solve(problem, setup, check_rank=False)
            except (SolverError, GNMDivergenceError, ReducedSolveError,
                    RankDeficiencyError, np.linalg.LinAlgError) as exc:
                warnings.warn(f"configuration skipped: {exc}", stacklevel=2)
                skipped += 1
                continue
            by_comp = {loc.comp.index: loc for loc in result.locals_}
            e_comp = {i: loc.residual_indicator(result.s)
                      for i, loc in by_comp.items()}
            jumps = jump_norms(problem, by_comp)
            e_port = {pi: math.sqrt(j["velocity_sq"] + j["pressure_sq"])
                      for pi, j in jumps.items()}
            s_full = _expand_controls(problem, result.s)

            # port marking: two-owner high-fidelity solves
            worst_ports = sorted(e_port, key=e_port.get, reverse=True)
            for pi in worst_ports[:policy.m_s]:
                p = next(q for q in net.ports if q.index == pi)
                try:
                    pres, pprob = _pair_port_sample(comps, net.ports, p,
                                                    s_full, delta)
                except (SolverError, GNMDivergenceError) as exc:
                    warnings.warn(f"port sample skipped: {exc}", stacklevel=2)
                    continue
                s_port = pres.s[pprob.layout.slices[p.index]]
                d_ctrl.append(rotate_control_basis(s_port, -p.omega))
                for comp, w in zip(pprob.comps, pres.states):
                    d_state[comp.label].append(rotate_state(
                        w - comp.lift, -comp.mu.theta, comp.n_nodes))

            # component marking: worst residual per archetype type
            by_label = {}
            for i, e in e_comp.items():
                lab = comps[i].label
                by_label.setdefault(lab, []).append((e, i))
            for lab, entries in by_label.items():
                entries.sort(reverse=True)
                for _, i in entries[:policy.m_w]:
                    comp = comps[i]
                    try:
                        if it == 1:
                            hsetup = RomSetup(
                                state_bases=setup.state_bases,
                                modes={**setup.modes, i: "fom"})
                            hres = rom_dd_solve(problem, hsetup,
                                                check_rank=False)
                            w = hres.states[i]
                        else:
                            s_loc = np.concatenate(
                                [s_full[pi] for pi in sorted(comp.couplings)])
                            w = solve_local(comp, s_loc,
                                            w0=result.states[i])
                    except (SolverError, GNMDivergenceError,
                            ReducedSolveError, np.linalg.LinAlgError) as exc:
                        warnings.warn(f"component sample skipped: {exc}",
                                      stacklevel=2)
                        continue
                    d_state[comp.label].append(rotate_state(
                        w - comp.lift, -comp.mu.theta, comp.n_nodes))

        m_old = W.V.shape[1]
        if d_ctrl:
            W = ReducedBasis(
                V=append_orthogonal_modes(W.V, np.column_stack(d_ctrl),
                                          norm_S, policy.m_glo),
                tag=W.tag, eigvals=W.eigvals,
                provenance=dict(W.provenance, iteration=it))
        Z = dict(Z)
        for lab, cols in d_state.items():
            if not cols:
                continue
            X = _cached_space(lab, res)[1]
            b = Z[lab]
            Z[lab] = ReducedBasis(
                V=append_orthogonal_modes(b.V, np.column_stack(cols), X,
                                          policy.n_glo),
                tag=b.tag, eigvals=b.eigvals,
                provenance=dict(b.provenance, iteration=it))
        # optional port-based re-enrichment: without it the state spaces
        # cannot resolve the response to the newly appended control modes
        # and the enlarged control space goes unused
        if (policy.reenrich_ports and data is not None
                and W.V.shape[1] > m_old):
            Z = port_based_state_enrichment(
                Z, W, data, res, policy.n_port_glo,
                new_port_modes=W.V[:, m_old:])
        record(it, skipped)
    return EnrichmentResult(W=W, Z=Z, history=history)


# ---------------------------------------------------------------------------
# test-set evaluation

def make_test_set(
    rng: np.random.Generator,
    n_networks: int,
    n_components: int,
    res: int,
    delta: float = 1e-8,
    Re_range: tuple[float, float] = (50.0, 150.0),
    Re_ref: float = 100.0,
) -> list:
    """Random networks with full-order DD reference solutions."""
    out = []
    for _ in range(n_networks):
        cfg = random_tree_config(rng, n_components, Re_range=Re_range,
                                 Re_ref=Re_ref)
        net = build_network(cfg)
        comps = instantiate_network(net, res)
        problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                            delta=delta)
        ref = sqp_solve(problem)
        out.append((net, comps, ref.states))
    return out


def evaluate_test_set(
    test_set: list,
    W: ReducedBasis,
    Z: dict[ArchetypeLabel, ReducedBasis],
    delta: float = 1e-8,
    mode: str = "minres",
) -> dict:
    """Per-component relative state errors of the reduced model."""
    errors = []
    failed = 0
    for net, comps, ref_states in test_set:
        try:
            control_bases, setup = _rom_setup_for(net, comps, W, Z, mode)
            problem = DDProblem(comps=comps, ports=net.ports, formulation=NEW,
                                delta=delta, control_bases=control_bases)
            result = rom_dd_solve(problem, setup, check_rank=False)
        except (SolverError, GNMDivergenceError, ReducedSolveError,
                RankDeficiencyError, np.linalg.LinAlgError):
            failed += 1
            continue
        for c, wr, wf in zip(comps, result.states, ref_states):
            errors.append(c.x_norm(wr - wf) / max(c.x_norm(wf), 1e-300))
    errors = np.asarray(errors)
    return {
        "n_errors": int(errors.size),
        "failed": failed,
        "median": float(np.median(errors)) if errors.size else math.inf,
        "mean": float(errors.mean()) if errors.size else math.inf,
        "max": float(errors.max()) if errors.size else math.inf,
    }

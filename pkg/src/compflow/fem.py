"""Stabilized equal-order FE assembly and nonlinear flow solves.

The steady incompressible Navier-Stokes residual is discretized with P2/P2
elements and consistent SUPG/PSPG/LSIC stabilization.  The same assembly
supports a linear Stokes mode (convection off, stabilization parameters
evaluated at zero velocity) and a pseudo-transient variant that augments
the residual with a backward-Euler term.

Each instantiated component carries its physical node coordinates, its
reference-frame norm matrix, Dirichlet data, optional port couplings and
fixed Neumann loads.  Local solves and the merged monolithic solve share
one Newton driver with a pseudo-transient-continuation fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import (
    ArchetypeLabel,
    GeomParams,
    Network,
    Port,
    instantiate_component,
    outlet_groups,
    rot2,
)
from .mesh import (
    FESpace,
    P2_VALS,
    TraceQuad,
    assemble_norms,
    element_geometry,
    make_space,
    port_trace,
    segment_matrices_1d,
)

NEWTON_TOL = 1e-10
NEWTON_MAXIT = 25
PTC_DT0 = 0.1
PTC_MAX_STEPS = 200


class SolverError(RuntimeError):
    """Nonlinear solve failed; carries the last iterate."""

    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# component container

@dataclass
class PortCoupling:
    """Coupling data of one component at one internal port.

    Trace nodes are listed in the port's canonical order (the upstream
    owner's curvilinear direction); control columns are ordered
    (g_x, g_y, h) blocks of trace nodal values in the physical frame.
    """

    port: Port
    sign: int
    trace_nodes: np.ndarray
    quad_w: np.ndarray          # physical quadrature weights
    B: np.ndarray               # (nq, n_t) trace evaluation matrix
    E: sp.csr_matrix            # (n_dofs, 3 n_t) coupling matrix, sign included

    @property
    def n_t(self) -> int:
        return len(self.trace_nodes)


@dataclass
class FlowComponent:
    """One instantiated component ready for assembly and local solves."""

    space: FESpace
    coords: np.ndarray
    nu: float
    convection: bool = True
    alpha_supg: float = 1.0
    body_force: object = None           # callable (n,2)->(n,2) or None
    lift: np.ndarray = None             # Dirichlet data / initial guess, full length
    neumann: np.ndarray = None          # fixed load vector (full length)
    couplings: dict[int, PortCoupling] = field(default_factory=dict)
    index: int = 0
    label: ArchetypeLabel | None = None
    mu: GeomParams | None = None
    X: sp.csr_matrix = None
    S_port: np.ndarray = None           # unit-port control norm blocks

    def __post_init__(self):
        self.geo = element_geometry(self.coords, self.space.mesh.tris)
        self.xq = np.einsum("qa,eai->eqi", P2_VALS, self.coords[self.space.mesh.tris])
        if self.X is None or self.S_port is None:
            X, S = assemble_norms(self.space)
            if self.X is None:
                self.X = X
            if self.S_port is None:
                self.S_port = S
        n = self.space.n_dofs
        if self.lift is None:
            self.lift = np.zeros(n)
        if self.neumann is None:
            self.neumann = np.zeros(n)
        self.free = self.space.free_dofs
        self._X_free_lu = None
        self._fq = None
        if self.body_force is not None:
            self._fq = np.asarray(
                self.body_force(self.xq.reshape(-1, 2))
            ).reshape(self.xq.shape)

    @property
    def n_dofs(self) -> int:
        return self.space.n_dofs

    @property
    def n_nodes(self) -> int:
        return self.space.n_nodes

    def x_free_lu(self):
        if self._X_free_lu is None:
            Xf = self.X[self.free][:, self.free].tocsc()
            self._X_free_lu = splu(Xf)
        return self._X_free_lu

    def dual_norm(self, r_free: np.ndarray) -> float:
        """Dual X-norm sqrt(r^T X^-1 r) of a free-dof residual."""
        with np.errstate(over="ignore", invalid="ignore"):
            v = r_free @ self.x_free_lu().solve(r_free)
        if not np.isfinite(v):
            return math.inf
        return float(math.sqrt(max(0.0, v)))

    def x_norm(self, w: np.ndarray) -> float:
        return float(math.sqrt(max(0.0, w @ (self.X @ w))))

    def trace_values(self, w: np.ndarray, port_index: int) -> np.ndarray:
        """(u_x, u_y, p) at the port quadrature points, stacked (3*nq,)."""
        c = self.couplings[port_index]
        nn = self.n_nodes
        return np.concatenate([
            c.B @ w[f * nn + c.trace_nodes] for f in range(3)
        ])

    def trace_matrix_rows(self, port_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Row index and dense map from full state to stacked trace values."""
        c = self.couplings[port_index]
        nn = self.n_nodes
        cols = np.concatenate([f * nn + c.trace_nodes for f in range(3)])
        T = sp.block_diag([c.B] * 3, format="csr")
        return cols, T


# ---------------------------------------------------------------------------
# residual / jacobian assembly

def _stab_params(comp: FlowComponent, u: np.ndarray, dt: float | None):
    """Elementwise SUPG/PSPG and LSIC parameters."""
    h = comp.geo.h[:, None]
    base = 9.0 * (4.0 * comp.nu / h**2) ** 2 * np.ones(u.shape[:2])
    if comp.convection:
        speed = np.linalg.norm(u, axis=2)
        base = base + (2.0 * speed / h) ** 2
    if dt is not None:
        base = base + (2.0 / dt) ** 2
    tau = comp.alpha_supg / np.sqrt(base)
    tau_lsic = h**2 / (4.0 * tau)
    return tau, tau_lsic


def assemble(
    comp: FlowComponent,
    w: np.ndarray,
    need_jac: bool = True,
    frozen_tau=None,
    ptc: tuple[float, np.ndarray] | None = None,
):
    """Residual (and Jacobian) of the stabilized flow equations.

    The Jacobian is the exact derivative of the residual with the
    stabilization parameters frozen at the current state; passing
    ``frozen_tau`` evaluates the residual itself with fixed parameters,
    which makes it the exact antiderivative of the Jacobian (used by the
    finite-difference consistency checks).
    """
    if not np.all(np.isfinite(w)):
        raise AssemblyError("non-finite state passed to assembly")
    space, geo = comp.space, comp.geo
    tris = space.mesh.tris
    nn = space.n_nodes
    V, grads, wq, lap = P2_VALS, geo.grads, geo.wq, geo.lap
    conv = comp.convection
    nu = comp.nu

    ue = np.stack([w[tris], w[nn + tris]], axis=2)          # (e,6,2)
    pe = w[2 * nn + tris]
    u = np.einsum("qa,ead->eqd", V, ue)
    G = np.einsum("eqaj,ead->eqdj", grads, ue)              # G[d,j] = du_d/dx_j
    p = np.einsum("qa,ea->eq", V, pe)
    gp = np.einsum("eqaj,ea->eqj", grads, pe)
    lap_u = np.einsum("ea,ead->ed", lap, ue)[:, None, :]
    div = G[:, :, 0, 0] + G[:, :, 1, 1]
    ug = np.einsum("eqaj,eqj->eqa", grads, u)               # u . grad(phi_a)

    rm = gp - nu * lap_u
    if conv:
        cterm = np.einsum("eqdj,eqj->eqd", G, u)
        rm = rm + cterm
    if comp._fq is not None:
        rm = rm - comp._fq
    dt = None
    if ptc is not None:
        dt, w_prev = ptc
        up = np.stack([w_prev[tris], w_prev[nn + tris]], axis=2)
        du_dt = (u - np.einsum("qa,ead->eqd", V, up)) / dt
        rm = rm + du_dt

    if frozen_tau is not None:
        tau, tau_l = frozen_tau
    else:
        tau, tau_l = _stab_params(comp, u, dt)
    T = wq * tau
    TL = wq * tau_l

    Rm = nu * np.einsum("eq,eqdj,eqaj->ead", wq, G, grads)
    if conv:
        Rm += np.einsum("eq,eqd,qa->ead", wq, cterm, V)
        # SUPG acts through the convective test weight u . grad(v); it is
        # absent in Stokes mode, which keeps that mode exactly linear.
        Rm += np.einsum("eq,eqa,eqd->ead", T, ug, rm)
    Rm -= np.einsum("eq,eq,eqad->ead", wq, p, grads)
    Rm += np.einsum("eq,eq,eqad->ead", TL, div, grads)
    if comp._fq is not None:
        Rm -= np.einsum("eq,eqd,qa->ead", wq, comp._fq, V)
    if ptc is not None:
        Rm += np.einsum("eq,eqd,qa->ead", wq, du_dt, V)
    Rc = -np.einsum("eq,eq,qa->ea", wq, div, V)
    Rc -= np.einsum("eq,eqd,eqad->ea", T, rm, grads)

    R = np.zeros(3 * nn)
    np.add.at(R, tris, Rm[:, :, 0])
    np.add.at(R, nn + tris, Rm[:, :, 1])
    np.add.at(R, 2 * nn + tris, Rc)
    if not need_jac:
        return R, None

    n_el = len(tris)
    Ke = np.zeros((n_el, 18, 18))
    visc = np.einsum("eq,eqaj,eqbj->eab", wq, grads, grads)
    mass = np.einsum("eq,qa,qb->eab", wq, V, V)
    supg_pp = np.einsum("eq,eqaj,eqbj->eab", T, grads, grads)
    ug_b = ug
    gGc = np.einsum("eqaj,eqjc->eqac", grads, G)  # grads_a . (du/dx_c)

    for d in range(2):
        for c in range(2):
            blk = np.zeros((n_el, 6, 6))
            if d == c:
                blk += nu * visc
                if conv:
                    blk += np.einsum("eq,qa,eqb->eab", wq, V, ug_b)
                    blk += np.einsum("eq,eqa,eqb->eab", T, ug, ug_b)
                    blk -= nu * np.einsum("eq,eqa,eb->eab", T, ug, lap)
                if ptc is not None:
                    blk += mass / dt
                    if conv:
                        blk += np.einsum("eq,eqa,qb->eab", T / dt, ug, V)
            if conv:
                blk += np.einsum("eq,qa,qb,eq->eab", wq, V, V, G[:, :, d, c])
                blk += np.einsum("eq,eqa,qb,eq->eab", T, ug, V, G[:, :, d, c])
                blk += np.einsum("eq,qb,eqa,eq->eab", T, V, grads[:, :, :, c], rm[:, :, d])
            blk += np.einsum("eq,eqa,eqb->eab", TL, grads[:, :, :, d], grads[:, :, :, c])
            Ke[:, 6 * d:6 * d + 6, 6 * c:6 * c + 6] += blk
        # momentum-pressure
        kp = -np.einsum("eq,qb,eqa->eab", wq, V, grads[:, :, :, d])
        if conv:
            kp += np.einsum("eq,eqa,eqb->eab", T, ug, grads[:, :, :, d])
        Ke[:, 6 * d:6 * d + 6, 12:18] += kp
        # continuity-velocity (c = d plays the trial-component role here)
    for c in range(2):
        blk = -np.einsum("eq,qa,eqb->eab", wq, V, grads[:, :, :, c])
        if conv:
            blk -= np.einsum("eq,qb,eqa->eab", T, V, gGc[:, :, :, c])
            blk -= np.einsum("eq,eqb,eqa->eab", T, ug_b, grads[:, :, :, c])
        blk += nu * np.einsum("eq,eb,eqa->eab", T, lap, grads[:, :, :, c])
        if ptc is not None:
            blk -= np.einsum("eq,qb,eqa->eab", T / dt, V, grads[:, :, :, c])
        Ke[:, 12:18, 6 * c:6 * c + 6] += blk
    Ke[:, 12:18, 12:18] -= supg_pp

    idx = np.concatenate([tris, nn + tris, 2 * nn + tris], axis=1)
    rows = np.repeat(idx, 18, axis=1).ravel()
    cols = np.tile(idx, (1, 18)).ravel()
    J = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(3 * nn, 3 * nn)).tocsr()
    return R, J


def frozen_tau_at(comp: FlowComponent, w: np.ndarray, dt: float | None = None):
    """Stabilization parameters evaluated at a fixed state."""
    tris = comp.space.mesh.tris
    nn = comp.n_nodes
    ue = np.stack([w[tris], w[nn + tris]], axis=2)
    u = np.einsum("qa,ead->eqd", P2_VALS, ue)
    return _stab_params(comp, u, dt)


# ---------------------------------------------------------------------------
# nonlinear drivers

def _residual_with_loads(comp, w, load, need_jac, ptc=None):
    R, J = assemble(comp, w, need_jac=need_jac, ptc=ptc)
    R = R + comp.neumann
    if load is not None:
        R = R + load
    return R, J


def newton_solve(
    comp: FlowComponent,
    w0: np.ndarray | None = None,
    load: np.ndarray | None = None,
    tol: float = NEWTON_TOL,
    maxit: int = NEWTON_MAXIT,
    ptc_fallback: bool = True,
) -> np.ndarray:
    """Newton solve of the component problem with fixed loads.

    Dirichlet dofs keep the values of the initial guess (default: the
    component lift).  Convergence is measured by the dual X-norm of the
    free-dof residual relative to the initial one.
    """
    w_init = (comp.lift if w0 is None else w0).copy()
    w = w_init.copy()
    free = comp.free
    r0 = None
    for it in range(maxit + 1):
        R, J = _residual_with_loads(comp, w, load, need_jac=True)
        rn = comp.dual_norm(R[free])
        if r0 is None:
            r0 = max(rn, 1e-300)
        if rn <= tol * max(r0, 1.0) or rn <= 1e-13:
            return w
        if it == maxit or not np.isfinite(rn):
            break
        Jff = J[free][:, free].tocsc()
        try:
            dw = splu(Jff).solve(-R[free])
        except RuntimeError as exc:
            raise SolverError(f"singular local Jacobian: {exc}", w) from exc
        w[free] += dw
    if ptc_fallback:
        # restart relaxation from the initial guess, not the diverged iterate
        start = w_init if not np.all(np.isfinite(w)) or rn > 1e3 else w
        return ptc_relax(comp, start, load=load, tol=tol)
    raise SolverError(
        f"Newton did not converge ({rn:.3e} after {maxit} iterations)", w
    )


def ptc_relax(
    comp: FlowComponent,
    w0: np.ndarray | None = None,
    load: np.ndarray | None = None,
    tol: float = NEWTON_TOL,
    dt0: float = PTC_DT0,
    max_steps: int = PTC_MAX_STEPS,
) -> np.ndarray:
    """Pseudo-transient continuation with SER time-step control."""
    w = (comp.lift if w0 is None else w0).copy()
    free = comp.free
    dt = dt0
    R, _ = _residual_with_loads(comp, w, load, need_jac=False)
    r_prev = comp.dual_norm(R[free])
    r0 = max(r_prev, 1e-300)
    if r_prev <= tol * max(r0, 1.0) or r_prev <= 1e-13:
        return w
    for _ in range(max_steps):
        # One Newton step of the backward-Euler problem started at w: the
        # pseudo-time term vanishes there, so the step direction is
        # -(J + mass/dt)^-1 R_steady(w).
        Rp, Jp = _residual_with_loads(comp, w, load, need_jac=True, ptc=(dt, w))
        Jff = Jp[free][:, free].tocsc()
        w_prev = w.copy()
        w[free] += splu(Jff).solve(-Rp[free])
        R, _ = _residual_with_loads(comp, w, load, need_jac=False)
        rn = comp.dual_norm(R[free])
        if rn <= tol * max(r0, 1.0) or rn <= 1e-13:
            # finish with plain Newton for quadratic tail accuracy
            return newton_solve(comp, w, load=load, tol=tol, ptc_fallback=False)
        if np.isfinite(rn) and rn > 0 and rn < 1e3 * max(r_prev, r0):
            dt *= min(2.0, max(0.5, r_prev / rn))
            r_prev = rn
        else:
            # reject the step: revert and shrink the pseudo-time step hard
            w = w_prev
            dt *= 0.25
            if dt < 1e-10:
                raise SolverError("PTC step size underflow", w)
    raise SolverError(f"PTC stagnated after {max_steps} steps ({rn:.3e})", w)


def solve_local(
    comp: FlowComponent,
    s: np.ndarray | None = None,
    w0: np.ndarray | None = None,
    tol: float = NEWTON_TOL,
    ptc_fallback: bool = True,
) -> np.ndarray:
    """Local solution map: solve the component with control s on its ports.

    ``s`` is the global stacked control over the component's coupled ports
    in increasing port index, or None for zero control.
    """
    load = coupling_load(comp, s)
    return newton_solve(comp, w0=w0, load=load, tol=tol, ptc_fallback=ptc_fallback)


def coupling_load(comp: FlowComponent, s: np.ndarray | None) -> np.ndarray | None:
    if s is None or not comp.couplings:
        return None
    load = np.zeros(comp.n_dofs)
    off = 0
    for pi in sorted(comp.couplings):
        c = comp.couplings[pi]
        m = 3 * c.n_t
        load += c.E @ s[off:off + m]
        off += m
    if off != len(s):
        raise AssemblyError(f"control length {len(s)} does not match ports ({off})")
    return load


# ---------------------------------------------------------------------------
# network instantiation

def _trace_quantities(space: FESpace, group: int, length: float, flip: bool):
    tq: TraceQuad = port_trace(space, group)
    nodes = tq.nodes[::-1] if flip else tq.nodes
    return nodes, tq.w_ref * length, tq.B


def _coupling_for(space: FESpace, port: Port, comp_index: int) -> PortCoupling:
    comp_side_up = port.up[0] == comp_index
    group = port.up[1] if comp_side_up else port.down[1]
    flip = (not comp_side_up) and port.flip_down
    nodes, wq, B = _trace_quantities(space, group, port.length, flip)
    sign = port.sign(comp_index)
    Mt = B.T @ (wq[:, None] * B)
    nn = space.n_nodes
    n_t = len(nodes)
    rows, cols, vals = [], [], []
    for f in range(3):
        r = np.repeat(f * nn + nodes, n_t)
        c = np.tile(np.arange(f * n_t, (f + 1) * n_t), n_t)
        rows.append(r)
        cols.append(c)
        vals.append(sign * Mt.ravel())
    E = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * nn, 3 * n_t),
    ).tocsr()
    return PortCoupling(port=port, sign=sign, trace_nodes=nodes,
                        quad_w=wq, B=B, E=E)


_SPACE_CACHE: dict = {}
_LIFT_CACHE: dict = {}


def _cached_space(label: ArchetypeLabel, res: int):
    key = (label, res)
    if key not in _SPACE_CACHE:
        space = make_space(label, res)
        X, S = assemble_norms(space)
        _SPACE_CACHE[key] = (space, X, S)
    return _SPACE_CACHE[key]


def poiseuille_profile(xi: np.ndarray) -> np.ndarray:
    return 4.0 * xi * (1.0 - xi)


def reference_lift(label: ArchetypeLabel, res: int, Re_ref: float,
                   inlet_profile=None) -> np.ndarray:
    """Flow solution on the reference inflow component at Re_ref.

    Used as Dirichlet lift; homogeneous Neumann on all outlet ports.  The
    lift at Reynolds number Re is (Re / Re_ref) times this field.
    """
    if not label.is_inflow:
        return np.zeros(3 * _cached_space(label, res)[0].n_nodes)
    custom = inlet_profile is not None
    prof = inlet_profile or poiseuille_profile
    key = (label, res, Re_ref)
    if not custom and key in _LIFT_CACHE:
        return _LIFT_CACHE[key]
    space, X, S = _cached_space(label, res)
    comp = FlowComponent(space=space, coords=space.mesh.nodes.copy(),
                         nu=1.0 / Re_ref, X=X, S_port=S,
                         label=label, mu=GeomParams())
    guess = np.zeros(comp.n_dofs)
    xi = space.mesh.nodes[space.inlet_nodes, 1]
    guess[space.inlet_nodes] = prof(xi)
    try:
        w = newton_solve(comp, guess)
    except SolverError:
        # continuation in viscosity: warm-start from easier Reynolds numbers
        w = guess
        for f in (0.1, 0.3, 0.6, 1.0):
            comp_f = FlowComponent(space=space, coords=space.mesh.nodes.copy(),
                                   nu=1.0 / (f * Re_ref), X=X, S_port=S,
                                   label=label, mu=GeomParams())
            w = newton_solve(comp_f, w, ptc_fallback=(f == 1.0))
    if not custom:
        _LIFT_CACHE[key] = w
    return w


def instantiate_network(network: Network, res: int,
                        convection: bool = True,
                        alpha_supg: float = 1.0) -> list[FlowComponent]:
    """Build solver-ready components for every member of the network."""
    comps = []
    nu = 1.0 / network.Re_ref
    scale = network.Re / network.Re_ref
    for i in range(network.n_components):
        label = network.label(i)
        mu = network.mu(i)
        space, X, S = _cached_space(label, res)
        coords = network.maps[i](space.mesh.nodes)
        lift_ref = reference_lift(label, res, network.Re_ref)
        lift = scale * rotate_state(lift_ref, mu.theta, space.n_nodes)
        comp = FlowComponent(space=space, coords=coords, nu=nu,
                             convection=convection, alpha_supg=alpha_supg,
                             lift=lift, index=i, label=label, mu=mu,
                             X=X, S_port=S)
        for port in network.ports_of(i):
            comp.couplings[port.index] = _coupling_for(space, port, i)
        comps.append(comp)
    return comps


def rotate_state(w: np.ndarray, theta: float, nn: int) -> np.ndarray:
    """Rotate the velocity part of a stacked nodal state by theta."""
    if theta == 0.0:
        return w.copy()
    R = rot2(theta)
    out = w.copy()
    out[:nn] = R[0, 0] * w[:nn] + R[0, 1] * w[nn:2 * nn]
    out[nn:2 * nn] = R[1, 0] * w[:nn] + R[1, 1] * w[nn:2 * nn]
    return out


def set_outflux(comp: FlowComponent, group: int, g_values: np.ndarray) -> None:
    """Impose a traction profile on a free outlet port (Neumann data).

    ``g_values`` stacks (g_x, g_y) nodal values on the ordered trace of
    the group; the contribution enters the residual like an upstream
    coupling (sign -1).
    """
    tq = port_trace(comp.space, group)
    length = comp.mu.gamma if comp.mu is not None else 1.0
    wq = tq.w_ref * length
    Mt = tq.B.T @ (wq[:, None] * tq.B)
    n_t = len(tq.nodes)
    load = np.zeros(comp.n_dofs)
    nn = comp.n_nodes
    for f in range(2):
        load[f * nn + tq.nodes] -= Mt @ g_values[f * n_t:(f + 1) * n_t]
    comp.neumann = comp.neumann + load


# ---------------------------------------------------------------------------
# monolithic solve

@dataclass
class MergedSystem:
    """Conforming union of the component systems with shared port dofs."""

    comps: list[FlowComponent]
    node_maps: list[np.ndarray]     # local node -> global node
    n_nodes: int

    def dof_map(self, i: int) -> np.ndarray:
        nm = self.node_maps[i]
        return np.concatenate([f * self.n_nodes + nm for f in range(3)])

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    def scatter(self, locals_: list[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.n_dofs)
        for i, wl in enumerate(locals_):
            out[self.dof_map(i)] = wl
        return out

    def restrict(self, w: np.ndarray) -> list[np.ndarray]:
        return [w[self.dof_map(i)] for i in range(len(self.comps))]


def merge_components(comps: list[FlowComponent], network: Network) -> MergedSystem:
    counts = [c.n_nodes for c in comps]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    parent = np.arange(offsets[-1])

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for port in network.ports:
        iu, iv = port.up[0], port.down[0]
        cu = comps[iu].couplings[port.index]
        cv = comps[iv].couplings[port.index]
        pu = comps[iu].coords[cu.trace_nodes]
        pv = comps[iv].coords[cv.trace_nodes]
        if not np.allclose(pu, pv, rtol=0.0, atol=1e-9 * max(1.0, port.length)):
            raise AssemblyError(f"non-conforming trace nodes at port {port.index}")
        for a, b in zip(offsets[iu] + cu.trace_nodes, offsets[iv] + cv.trace_nodes):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    roots = np.array([find(a) for a in range(offsets[-1])])
    uniq, glob = np.unique(roots, return_inverse=True)
    node_maps = [glob[offsets[i]:offsets[i + 1]] for i in range(len(comps))]
    return MergedSystem(comps=comps, node_maps=node_maps, n_nodes=len(uniq))


def solve_monolithic(
    comps: list[FlowComponent],
    network: Network,
    tol: float = NEWTON_TOL,
    maxit: int = NEWTON_MAXIT,
) -> tuple[list[np.ndarray], MergedSystem]:
    """Reference conforming solve of the whole network.

    Duplicate port dofs are merged; the coupling terms of the two owners
    cancel, so the global residual is the plain sum of local residuals.
    """
    sys_ = merge_components(comps, network)
    ng = sys_.n_dofs
    dmaps = [sys_.dof_map(i) for i in range(len(comps))]

    dir_mask = np.zeros(ng, dtype=bool)
    w = np.zeros(ng)
    for i, c in enumerate(comps):
        dir_mask[dmaps[i][c.space.dirichlet_dofs]] = True
    for i, c in enumerate(comps):
        dl = c.space.dirichlet_dofs
        w[dmaps[i][dl]] = c.lift[dl]
    free = np.flatnonzero(~dir_mask)

    def global_residual(wg, need_jac, ptc_dt=None, wg_prev=None):
        R = np.zeros(ng)
        Js = []
        for i, c in enumerate(comps):
            wl = wg[dmaps[i]]
            ptc = None
            if ptc_dt is not None:
                ptc = (ptc_dt, wg_prev[dmaps[i]])
            Rl, Jl = assemble(c, wl, need_jac=need_jac, ptc=ptc)
            Rl = Rl + c.neumann
            np.add.at(R, dmaps[i], Rl)
            if need_jac:
                Jl = Jl.tocoo()
                Js.append((dmaps[i][Jl.row], dmaps[i][Jl.col], Jl.data))
            del Jl
        J = None
        if need_jac:
            rows = np.concatenate([a for a, _, _ in Js])
            cols = np.concatenate([b for _, b, _ in Js])
            vals = np.concatenate([v for _, _, v in Js])
            J = sp.coo_matrix((vals, (rows, cols)), shape=(ng, ng)).tocsr()
        return R, J

    # dual-norm scaling via the summed local norm matrices
    Xg_rows, Xg_cols, Xg_vals = [], [], []
    for i, c in enumerate(comps):
        Xc = c.X.tocoo()
        Xg_rows.append(dmaps[i][Xc.row])
        Xg_cols.append(dmaps[i][Xc.col])
        Xg_vals.append(Xc.data)
    Xg = sp.coo_matrix(
        (np.concatenate(Xg_vals), (np.concatenate(Xg_rows), np.concatenate(Xg_cols))),
        shape=(ng, ng)).tocsr()
    X_lu = splu(Xg[free][:, free].tocsc())

    def dual(rf):
        return float(math.sqrt(max(0.0, rf @ X_lu.solve(rf))))

    def newton(wg, use_ptc_dt=None):
        r0 = None
        for it in range(maxit + 1):
            R, J = global_residual(wg, True)
            rn = dual(R[free])
            if r0 is None:
                r0 = max(rn, 1e-300)
            if rn <= tol * max(r0, 1.0) or rn <= 1e-13:
                return wg, True
            if it == maxit or not np.isfinite(rn):
                return wg, False
            wg[free] += splu(J[free][:, free].tocsc()).solve(-R[free])
        return wg, False

    wg, ok = newton(w.copy())
    if not ok:
        # PTC fallback
        wg = w.copy()
        dt = PTC_DT0
        R, _ = global_residual(wg, False)
        r_prev = dual(R[free])
        r0 = max(r_prev, 1e-300)
        for _ in range(PTC_MAX_STEPS):
            Rp, Jp = global_residual(wg, True, ptc_dt=dt, wg_prev=wg)
            wg[free] += splu(Jp[free][:, free].tocsc()).solve(-Rp[free])
            R, _ = global_residual(wg, False)
            rn = dual(R[free])
            if rn <= tol * max(r0, 1.0) or rn <= 1e-13:
                wg, ok = newton(wg)
                break
            dt *= min(2.0, max(0.5, r_prev / rn))
            r_prev = rn
        else:
            raise SolverError("monolithic PTC stagnated", sys_.restrict(wg))
        if not ok:
            raise SolverError("monolithic Newton failed after PTC", sys_.restrict(wg))
    return sys_.restrict(wg), sys_


def network_norm(comps: list[FlowComponent], states: list[np.ndarray]) -> float:
    """Global X norm: root of the sum of squared component norms."""
    return float(math.sqrt(sum(c.x_norm(w) ** 2 for c, w in zip(comps, states))))

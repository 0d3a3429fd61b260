"""Optimization-based domain decomposition of component networks.

The decomposed problem minimizes the squared interface jump of the state
plus a small control regularizer, subject to the local flow equations with
interface controls acting as Neumann loads.  Two formulations are
supported: the standard one (velocity jump only, L2 regularization of g,
no continuity control) and the extended one (velocity and pressure jump,
tangential-H1 regularization of g, extra control h acting on the
continuity equation).

Both the Gauss-Newton solver (exact local solves + linearized
least-squares in the control) and the SQP solver (linearized local
constraints, static condensation to a control least-squares, explicit
state update) share one outer loop over per-component affine local
models; the reduced-order module plugs its own local models into the same
loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .geometry import Port
from .mesh import segment_matrices_1d
from .fem import (
    FlowComponent,
    SolverError,
    assemble,
    coupling_load,
    newton_solve,
)

DD_TOL = 1e-8
DD_MAXIT = 50


class GNMDivergenceError(RuntimeError):
    """A local solve inside GNM diverged; SQP or PTC is advised."""


class RankDeficiencyError(RuntimeError):
    """Condensed control system is rank deficient; enrichment is needed."""


@dataclass(frozen=True)
class Formulation:
    """Which jump terms, controls and regularizer define the objective."""

    include_h: bool
    jump_pressure: bool
    reg: str                     # "h1" or "l2"
    name: str = ""


NEW = Formulation(include_h=True, jump_pressure=True, reg="h1", name="new")
STANDARD = Formulation(include_h=False, jump_pressure=False, reg="l2", name="standard")


def formulation_by_name(name: str) -> Formulation:
    if name == "new":
        return NEW
    if name == "standard":
        return STANDARD
    raise ValueError(f"unknown formulation {name!r}")


# ---------------------------------------------------------------------------
# control layout

@dataclass
class ControlLayout:
    """Global control vector layout and per-port column maps.

    For each internal port, ``C[j]`` maps the port's control coefficients
    onto full trace data (g_x, g_y, h); it is a column selector for the
    full-order control and a reduced basis for ROM controls.  ``reg[j]``
    is the induced regularization matrix.
    """

    ports: list[Port]
    C: dict[int, np.ndarray]
    reg: dict[int, np.ndarray]
    slices: dict[int, slice]
    n: int

    def reg_matrix(self) -> np.ndarray:
        S = np.zeros((self.n, self.n))
        for p in self.ports:
            sl = self.slices[p.index]
            S[sl, sl] = self.reg[p.index]
        return S

    def control_norm(self, s: np.ndarray) -> float:
        return float(math.sqrt(max(0.0, s @ (self.reg_matrix() @ s))))


def port_control_norm_matrix(n_t: int, reg: str) -> np.ndarray:
    """Full-trace control norm on the unit reference port."""
    K1, M1 = segment_matrices_1d(n_t)
    G = K1 + M1 if reg == "h1" else M1
    S = np.zeros((3 * n_t, 3 * n_t))
    S[:n_t, :n_t] = G
    S[n_t:2 * n_t, n_t:2 * n_t] = G
    S[2 * n_t:, 2 * n_t:] = M1
    return S


def make_layout(
    comps: list[FlowComponent],
    ports: list[Port],
    formulation: Formulation,
    control_bases: dict[int, np.ndarray] | None = None,
) -> ControlLayout:
    C, reg, slices = {}, {}, {}
    off = 0
    for p in ports:
        owner = next(c for c in comps if p.index in c.couplings)
        n_t = owner.couplings[p.index].n_t
        S = port_control_norm_matrix(n_t, formulation.reg)
        if control_bases is not None and p.index in control_bases:
            Cj = np.asarray(control_bases[p.index])
        elif formulation.include_h:
            Cj = np.eye(3 * n_t)
        else:
            Cj = np.eye(3 * n_t)[:, :2 * n_t]
        C[p.index] = Cj
        reg[p.index] = Cj.T @ S @ Cj
        k = Cj.shape[1]
        slices[p.index] = slice(off, off + k)
        off += k
    return ControlLayout(ports=ports, C=C, reg=reg, slices=slices, n=off)


# ---------------------------------------------------------------------------
# problem container

@dataclass
class DDProblem:
    comps: list[FlowComponent]
    ports: list[Port]
    formulation: Formulation = NEW
    delta: float = 1e-8
    control_bases: dict[int, np.ndarray] | None = None

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        self.layout = make_layout(
            self.comps, self.ports, self.formulation, self.control_bases
        )


# ---------------------------------------------------------------------------
# local models

class FomLocal:
    """Full-order local model: exact constraints, affine in (state, control)."""

    kind = "fom"

    def __init__(self, comp: FlowComponent, layout: ControlLayout, w0=None):
        self.comp = comp
        self.layout = layout
        self.port_ids = sorted(comp.couplings)
        cols = []
        for pi in self.port_ids:
            cols.append(comp.couplings[pi].E @ layout.C[pi])
        self.EC = np.hstack(cols) if cols else np.zeros((comp.n_dofs, 0))
        self._col_slices = {}
        off = 0
        for pi in self.port_ids:
            k = layout.C[pi].shape[1]
            self._col_slices[pi] = slice(off, off + k)
            off += k
        self.k_loc = off
        self.w = comp.lift.copy() if w0 is None else np.asarray(w0, float).copy()
        self.a = None
        self.B = None

    def local_control(self, s: np.ndarray) -> np.ndarray:
        if self.k_loc == 0:
            return np.zeros(0)
        return np.concatenate(
            [s[self.layout.slices[pi]] for pi in self.port_ids]
        )

    def solve_exact(self, s: np.ndarray) -> None:
        """Nonlinear local solve at fixed control (GNM constraint)."""
        sl = self.local_control(s)
        load = self.EC @ sl if self.k_loc else None
        try:
            self.w = newton_solve(self.comp, w0=self.w, load=load)
        except SolverError as exc:
            raise GNMDivergenceError(
                f"local solve diverged on component {self.comp.index}; "
                "use the SQP solver or PTC"
            ) from exc

    def linearize(self, s: np.ndarray) -> None:
        """Affine model w(s) = a + B s_loc around the current state."""
        comp = self.comp
        free = comp.free
        R, J = assemble(comp, self.w)
        R = R + comp.neumann
        lu = splu(J[free][:, free].tocsc())
        self.a = self.w.copy()
        self.a[free] += lu.solve(-R[free])
        self.B = np.zeros((comp.n_dofs, self.k_loc))
        if self.k_loc:
            Ef = np.asarray(self.EC[free].todense()) if sp.issparse(self.EC) \
                else self.EC[free]
            self.B[free] = lu.solve(-Ef)

    def prepare(self, s: np.ndarray, method: str) -> None:
        if method == "gnm":
            self.solve_exact(s)
            self.linearize(s)
            # recenter so that w(s) = a + B s_loc holds at the solve point
            self.a = self.w - self.B @ self.local_control(s)
        else:
            self.linearize(s)

    def trace_affine(self, port_index: int):
        comp = self.comp
        cols, T = comp.trace_matrix_rows(port_index)
        t0 = T @ self.a[cols]
        TB = T @ self.B[cols, :] if self.k_loc else np.zeros((T.shape[0], 0))
        return t0, TB, self._col_slices

    def trace_values(self, port_index: int) -> np.ndarray:
        return self.comp.trace_values(self.w, port_index)

    def finalize(self, s: np.ndarray, method: str) -> None:
        if method == "sqp":
            self.w = self.a + self.B @ self.local_control(s)

    def state(self) -> np.ndarray:
        return self.w

    def residual_indicator(self, s: np.ndarray) -> float:
        comp = self.comp
        R, _ = assemble(comp, self.w, need_jac=False)
        R = R + comp.neumann
        load = self.EC @ self.local_control(s) if self.k_loc else 0.0
        r = R + load
        return comp.dual_norm(r[comp.free])


# ---------------------------------------------------------------------------
# objective pieces

def _jump_row_count(formulation: Formulation, nq: int) -> slice:
    return slice(0, 3 * nq) if formulation.jump_pressure else slice(0, 2 * nq)


def _port_weights(comp: FlowComponent, port_index: int) -> np.ndarray:
    wq = comp.couplings[port_index].quad_w
    return np.concatenate([wq, wq, wq])


def condensed_system(problem: DDProblem, locals_by_comp: dict[int, object]):
    """Weighted jump rows G, rhs d of the condensed control least-squares."""
    layout = problem.layout
    G_rows, d_rows = [], []
    for p in problem.ports:
        up, down = locals_by_comp[p.up[0]], locals_by_comp[p.down[0]]
        t0u, TBu, slices_u = up.trace_affine(p.index)
        t0d, TBd, slices_d = down.trace_affine(p.index)
        nq = len(t0u) // 3
        w = _port_weights(up.comp, p.index)
        sel = _jump_row_count(problem.formulation, nq)
        sq = np.sqrt(w[sel])
        G = np.zeros((sq.size, layout.n))
        for TB, slices, sgn in ((TBu, slices_u, 1.0), (TBd, slices_d, -1.0)):
            for pi, cs in slices.items():
                G[:, layout.slices[pi]] += sgn * sq[:, None] * TB[sel, cs]
        d = -sq * (t0u[sel] - t0d[sel])
        G_rows.append(G)
        d_rows.append(d)
    return np.vstack(G_rows), np.concatenate(d_rows)


def solve_control_ls(G: np.ndarray, d: np.ndarray, S: np.ndarray, delta: float):
    """min |G s - d|^2 + delta s^T S s via normal equations + Cholesky.

    Falls back to an SVD least-squares solve when the normal matrix is
    singular (notably at delta = 0 with redundant controls).
    """
    A = G.T @ G + delta * S
    b = G.T @ d
    try:
        c, low = sla.cho_factor(A, check_finite=False)
        return sla.cho_solve((c, low), b, check_finite=False)
    except sla.LinAlgError:
        if delta > 0:
            L = sla.cholesky(S, lower=True)
            Gs = np.vstack([G, math.sqrt(delta) * L.T])
            ds = np.concatenate([d, np.zeros(S.shape[0])])
        else:
            Gs, ds = G, d
        s, *_ = np.linalg.lstsq(Gs, ds, rcond=None)
        return s


def jump_norms(problem: DDProblem, locals_by_comp: dict[int, object]) -> dict:
    """Per-port squared L2 jumps of velocity and pressure at current states."""
    out = {}
    for p in problem.ports:
        up, down = locals_by_comp[p.up[0]], locals_by_comp[p.down[0]]
        tu = up.trace_values(p.index)
        td = down.trace_values(p.index)
        nq = len(tu) // 3
        wq = _port_weights(up.comp, p.index)[:nq]
        dj = tu - td
        vel = float(wq @ (dj[:nq] ** 2 + dj[nq:2 * nq] ** 2))
        pres = float(wq @ dj[2 * nq:] ** 2)
        out[p.index] = {"velocity_sq": vel, "pressure_sq": pres}
    return out


def objective_value(problem: DDProblem, locals_by_comp, s: np.ndarray):
    """(objective, jump term) at the current local states and control."""
    jumps = jump_norms(problem, locals_by_comp)
    jump = 0.0
    for p in problem.ports:
        j = jumps[p.index]
        jump += j["velocity_sq"]
        if problem.formulation.jump_pressure:
            jump += j["pressure_sq"]
    reg = problem.layout.control_norm(s) ** 2
    return 0.5 * jump + 0.5 * problem.delta * reg, jump


# ---------------------------------------------------------------------------
# outer loop

@dataclass
class DDResult:
    states: list[np.ndarray]
    s: np.ndarray
    log: list[tuple]
    converged: bool
    locals_: list = field(default_factory=list)
    layout: ControlLayout = None

    @property
    def objective(self) -> float:
        return self.log[-1][1] if self.log else math.nan

    @property
    def jump(self) -> float:
        return self.log[-1][2] if self.log else math.nan


def _trace_values_of(loc, port_index):
    return loc.trace_values(port_index)


def optimize(
    problem: DDProblem,
    locals_: list,
    s0: np.ndarray | None = None,
    method: str = "sqp",
    tol: float = DD_TOL,
    maxit: int = DD_MAXIT,
) -> DDResult:
    """Shared GNM/SQP outer loop over affine local models."""
    layout = problem.layout
    by_comp = {loc.comp.index: loc for loc in locals_}
    s = np.zeros(layout.n) if s0 is None else np.asarray(s0, float).copy()
    S = layout.reg_matrix()
    log = []
    converged = False
    best_obj, best_it = math.inf, 0
    for it in range(1, maxit + 1):
        for loc in locals_:
            loc.prepare(s, method)
        G, d = condensed_system(problem, by_comp)
        s_new = solve_control_ls(G, d, S, problem.delta)
        ds = s_new - s
        denom = max(math.sqrt(max(0.0, s_new @ (S @ s_new))), 1e-300)
        inc = math.sqrt(max(0.0, ds @ (S @ ds))) / denom
        for loc in locals_:
            loc.finalize(s_new, method)
        s = s_new
        obj, jump = objective_value(problem, by_comp, s)
        log.append((it, obj, jump, inc))
        if inc <= tol:
            converged = True
            break
        # The control increment can floor at round-off amplified by 1/delta
        # in directions the jump barely observes; treat an objective that
        # stopped improving several iterations ago as converged.
        if obj < best_obj * (1.0 - 1e-8):
            best_obj, best_it = obj, it
        elif it - best_it >= 5:
            converged = True
            break
    if method == "gnm":
        # states correspond to the previous control; resolve once at s
        for loc in locals_:
            loc.solve_exact(s)
        obj, jump = objective_value(problem, by_comp, s)
        log.append((len(log) + 1, obj, jump, 0.0))
    states = [by_comp[i].state() for i in sorted(by_comp)]
    return DDResult(states=states, s=s, log=log, converged=converged,
                    locals_=locals_, layout=layout)


def _make_fom_locals(problem: DDProblem, w0=None) -> list[FomLocal]:
    locals_ = []
    for k, comp in enumerate(problem.comps):
        wi = None if w0 is None else w0[k]
        locals_.append(FomLocal(comp, problem.layout, w0=wi))
    return locals_


def sqp_solve(problem: DDProblem, w0=None, s0=None,
              tol: float = DD_TOL, maxit: int = DD_MAXIT) -> DDResult:
    """SQP with static condensation on the full-order decomposition."""
    locals_ = _make_fom_locals(problem, w0)
    return optimize(problem, locals_, s0=s0, method="sqp", tol=tol, maxit=maxit)


def gnm_solve(problem: DDProblem, s0=None, w0=None,
              tol: float = DD_TOL, maxit: int = DD_MAXIT) -> DDResult:
    """Gauss-Newton with exact local solves on the full-order decomposition."""
    locals_ = _make_fom_locals(problem, w0)
    return optimize(problem, locals_, s0=s0, method="gnm", tol=tol, maxit=maxit)


def objective(problem: DDProblem, states: list[np.ndarray], s: np.ndarray):
    """Objective of arbitrary states/control (no solve)."""
    locals_ = _make_fom_locals(problem, states)
    for loc, w in zip(locals_, states):
        loc.w = np.asarray(w, float)
    by_comp = {loc.comp.index: loc for loc in locals_}
    return objective_value(problem, by_comp, s)


# ---------------------------------------------------------------------------
# indicators

@dataclass
class Indicators:
    component: dict[int, float]
    port_jump: dict[int, float]


def indicators(problem: DDProblem, states: list[np.ndarray], s: np.ndarray) -> Indicators:
    """Dual-norm residual per component and L2 state jump per port."""
    locals_ = _make_fom_locals(problem, states)
    for loc, w in zip(locals_, states):
        loc.w = np.asarray(w, float)
    by_comp = {loc.comp.index: loc for loc in locals_}
    comp_err = {loc.comp.index: loc.residual_indicator(s) for loc in locals_}
    jumps = jump_norms(problem, by_comp)
    port_err = {
        pi: math.sqrt(j["velocity_sq"] + j["pressure_sq"])
        for pi, j in jumps.items()
    }
    return Indicators(component=comp_err, port_jump=port_err)


# ---------------------------------------------------------------------------
# formulation comparison and interface-control studies

def compare_formulations(
    comps: list[FlowComponent],
    ports: list[Port],
    mono_states: list[np.ndarray] | None = None,
    delta: float = 1e-8,
    tol: float = DD_TOL,
) -> dict:
    """Solve with both formulations; report jumps and monolithic deviation."""
    report = {}
    for form in (NEW, STANDARD):
        problem = DDProblem(comps=comps, ports=ports, formulation=form, delta=delta)
        res = sqp_solve(problem, tol=tol)
        by_comp = {loc.comp.index: loc for loc in res.locals_}
        jumps = jump_norms(problem, by_comp)
        p_jump = math.sqrt(sum(j["pressure_sq"] for j in jumps.values()))
        v_jump = math.sqrt(sum(j["velocity_sq"] for j in jumps.values()))
        entry = {
            "pressure_jump_l2": p_jump,
            "velocity_jump_l2": v_jump,
            "iterations": len(res.log),
            "converged": res.converged,
        }
        if mono_states is not None:
            num = sum(c.x_norm(w - m) ** 2
                      for c, w, m in zip(comps, res.states, mono_states))
            den = sum(c.x_norm(m) ** 2 for c, m in zip(comps, mono_states))
            entry["state_error_rel"] = math.sqrt(num / den)
        report[form.name] = entry
    return report


def construct_interface_control(
    comps: list[FlowComponent],
    states: list[np.ndarray],
    port: Port,
) -> np.ndarray:
    """Control (g*, h*) that makes a conforming global solution satisfy
    both local systems at a port.

    The coupling acts through trace mass matrices, so the control solves a
    small least-squares system against the upstream local residual rows on
    the free trace dofs.
    """
    iu = port.up[0]
    comp = comps[iu]
    w = states[iu]
    R, _ = assemble(comp, w, need_jac=False)
    R = R + comp.neumann
    c = comp.couplings[port.index]
    Mt = c.B.T @ (c.quad_w[:, None] * c.B)
    nn = comp.n_nodes
    dir_mask = np.zeros(comp.n_dofs, dtype=bool)
    dir_mask[comp.space.dirichlet_dofs] = True
    s = np.zeros(3 * c.n_t)
    for f in range(3):
        rows_dofs = f * nn + c.trace_nodes
        keep = ~dir_mask[rows_dofs]
        # E_up = -Mt, so -Mt s + R = 0 on tested rows
        rhs = R[rows_dofs][keep]
        sol, *_ = np.linalg.lstsq(Mt[keep], rhs, rcond=None)
        s[f * c.n_t:(f + 1) * c.n_t] = sol
    return s


def h_star_refinement_study(
    mesh_cells: tuple[int, ...] = (4, 8, 16),
    delta: float = 1e-8,
) -> list[dict]:
    """Interface-control magnitude under mesh refinement (Stokes problem).

    Solves a manufactured Stokes problem on the unit square split at
    x = 0.5 and reports the L2 norm of the optimal continuity control h*
    on each mesh; it decreases as the discrete divergence constraint
    tightens.
    """
    from .stokes_demo import build_stokes_pair  # local import avoids a cycle
    rows = []
    for n in mesh_cells:
        comps, port = build_stokes_pair(n)
        problem = DDProblem(comps=comps, ports=[port], formulation=NEW, delta=delta)
        res = sqp_solve(problem)
        n_t = comps[0].couplings[port.index].n_t
        h = res.s[2 * n_t:3 * n_t]
        _, M1 = segment_matrices_1d(n_t, length=port.length)
        h_l2 = math.sqrt(max(0.0, h @ (M1 @ h)))
        rows.append({"cells": n, "h_star_l2": h_l2,
                     "objective": res.objective, "jump": res.jump})
    return rows

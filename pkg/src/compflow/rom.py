"""POD compression and projection-based local reduced-order models.

State snapshots are compressed by the method of snapshots under the
component norm; local models reconstruct the state as lift + V alpha and
couple to the interface optimization through reduced control coefficients
beta.  Three local projections are available: Galerkin (square system on
the trial space), LSPG (least squares over an empirical test space built
from Riesz representatives of Jacobian-applied trial modes) and minimum
residual (least squares in the dual norm).  Arbitrary mixtures of
full-order and reduced components plug into the shared interface
optimization loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import FlowComponent, assemble, rotate_state
from .ddopt import (
    ControlLayout,
    DDProblem,
    DDResult,
    FomLocal,
    RankDeficiencyError,
    condensed_system,
    optimize,
)

POD_RANK_TOL = 1e-13


class ReducedSolveError(RuntimeError):
    pass


@dataclass
class ReducedBasis:
    """Norm-orthonormal basis with provenance metadata."""

    V: np.ndarray                  # (N, n) columns are modes
    tag: str = ""
    eigvals: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.V.shape[1]


def _apply_norm(X, v):
    return X @ v if sp.issparse(X) or isinstance(X, np.ndarray) else X(v)


def pod(snapshots: np.ndarray, norm, n: int,
        energy: float | None = None, tag: str = "") -> ReducedBasis:
    """Method of snapshots: eigen-decomposition of the Gram matrix.

    Modes are orthonormal under ``norm`` and ordered by decreasing
    eigenvalue; the sign convention makes the largest-magnitude entry of
    each mode positive.  If ``n`` exceeds the snapshot rank, the available
    rank-many modes are returned with a warning.
    """
    S = np.atleast_2d(np.asarray(snapshots, float))
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("need at least one snapshot column")
    G = S.T @ _apply_norm(norm, S)
    G = 0.5 * (G + G.T)
    lam, U = np.linalg.eigh(G)
    lam, U = lam[::-1], U[:, ::-1]
    rank = int(np.sum(lam > max(lam[0], 0.0) * POD_RANK_TOL)) if lam.size else 0
    if n > rank:
        warnings.warn(
            f"requested {n} modes but snapshot rank is {rank}; truncating",
            stacklevel=2,
        )
        n = rank
    if energy is not None and rank > 0:
        tot = np.cumsum(lam[:rank]) / np.sum(lam[:rank])
        n = min(n, int(np.searchsorted(tot, energy) + 1))
    V = S @ (U[:, :n] / np.sqrt(lam[:n]))
    for j in range(V.shape[1]):
        k = np.argmax(np.abs(V[:, j]))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    return ReducedBasis(V=V, tag=tag, eigvals=lam[:n].copy(),
                        provenance={"n_snapshots": S.shape[1], "rank": rank})


def orthonormalize(V: np.ndarray, norm) -> np.ndarray:
    """Gram-Schmidt under the given norm (two passes for stability)."""
    V = np.array(V, float)
    out = []
    for j in range(V.shape[1]):
        v = V[:, j]
        for _ in range(2):
            for u in out:
                v = v - u * (u @ _apply_norm(norm, v))
        nv = math.sqrt(max(0.0, v @ _apply_norm(norm, v)))
        if nv > 1e-12:
            out.append(v / nv)
    return np.column_stack(out) if out else V[:, :0]


def append_orthogonal_modes(Z: np.ndarray, snapshots: np.ndarray, norm,
                            n_new: int, tag: str = "") -> np.ndarray:
    """Hierarchical basis update: POD of the Z-orthogonal projections.

    Existing modes are unchanged; at most ``n_new`` modes spanning the
    orthogonal complement of col(Z) are appended.
    """
    S = np.atleast_2d(np.asarray(snapshots, float))
    if Z.size:
        proj = S - Z @ (Z.T @ _apply_norm(norm, S))
    else:
        proj = S
    nrm2 = np.einsum("ij,ij->j", proj, _apply_norm(norm, proj))
    keep = nrm2 > 1e-24
    if not np.any(keep):
        return Z
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        extra = pod(proj[:, keep], norm, n_new, tag=tag).V
    if extra.shape[1] == 0:
        return Z
    return np.hstack([Z, orthonormalize(extra, norm)]) if Z.size else extra


def rotate_control_basis(W: np.ndarray, omega: float) -> np.ndarray:
    """Instantiate a reference-frame control basis at port angle omega."""
    n_t = W.shape[0] // 3
    out = W.copy()
    c, s = math.cos(omega), math.sin(omega)
    out[:n_t] = c * W[:n_t] - s * W[n_t:2 * n_t]
    out[n_t:2 * n_t] = s * W[:n_t] + c * W[n_t:2 * n_t]
    return out


def instantiate_state_basis(Z: np.ndarray, theta: float, nn: int) -> np.ndarray:
    """Rotate reference-frame state modes into the physical frame."""
    if theta == 0.0:
        return Z.copy()
    return np.column_stack([rotate_state(Z[:, j], theta, nn)
                            for j in range(Z.shape[1])])


# ---------------------------------------------------------------------------
# reduced local models

class RomLocal:
    """Projection-based local model for the interface optimization loop.

    ``mode`` selects the projection: 'galerkin' (square reduced system),
    'lspg' (least squares over the empirical test space Y) or 'minres'
    (least squares in the dual X norm).
    """

    def __init__(self, comp: FlowComponent, layout: ControlLayout,
                 V: np.ndarray, mode: str = "lspg",
                 Y: np.ndarray | None = None, alpha0: np.ndarray | None = None):
        if mode == "lspg" and Y is None:
            raise ValueError("LSPG mode needs a test basis Y")
        self.comp = comp
        self.layout = layout
        self.V = np.asarray(V, float)
        self.Y = None if Y is None else np.asarray(Y, float)
        self.mode = mode
        self.n = self.V.shape[1]
        self.port_ids = sorted(comp.couplings)
        cols = [comp.couplings[pi].E @ layout.C[pi] for pi in self.port_ids]
        self.EC = np.hstack(cols) if cols else np.zeros((comp.n_dofs, 0))
        self._col_slices = {}
        off = 0
        for pi in self.port_ids:
            k = layout.C[pi].shape[1]
            self._col_slices[pi] = slice(off, off + k)
            off += k
        self.k_loc = off
        self.alpha = np.zeros(self.n) if alpha0 is None else np.asarray(alpha0, float).copy()
        self.a_alpha = None
        self.B_alpha = None

    # -- state reconstruction

    def full_state(self, alpha=None) -> np.ndarray:
        a = self.alpha if alpha is None else alpha
        return self.comp.lift + self.V @ a

    def state(self) -> np.ndarray:
        return self.full_state()

    def local_control(self, s: np.ndarray) -> np.ndarray:
        if self.k_loc == 0:
            return np.zeros(0)
        return np.concatenate([s[self.layout.slices[pi]] for pi in self.port_ids])

    # -- reduced linearization

    def _reduced_ops(self, alpha, dt: float | None = None):
        """(Rhat, Jhat, Ehat) of the chosen projection at alpha.

        With ``dt`` the Jacobian carries the pseudo-transient mass term
        (the pseudo-time residual contribution vanishes at the
        linearization point, as in the full-order relaxation).
        """
        comp = self.comp
        w = self.full_state(alpha)
        R, J = assemble(comp, w, ptc=None if dt is None else (dt, w))
        R = R + comp.neumann
        if self.mode == "galerkin":
            JV = J @ self.V
            return self.V.T @ R, self.V.T @ JV, self.V.T @ self.EC
        if self.mode == "lspg":
            JV = J @ self.V
            return self.Y.T @ R, self.Y.T @ JV, self.Y.T @ self.EC
        # minimum-residual: weight by X^-1 on the free dofs
        free = comp.free
        lu = comp.x_free_lu()
        JVf = (J @ self.V)[free]
        P = lu.solve(JVf)
        Rh = P.T @ R[free]
        Jh = P.T @ JVf
        Eh = P.T @ self.EC[free]
        # symmetricized normal data: return in least-squares form
        return Rh, Jh, Eh

    def _affine_from(self, alpha, dt: float | None = None):
        Rh, Jh, Eh = self._reduced_ops(alpha, dt)
        rhs = np.column_stack([Rh, Eh]) if Eh.size else Rh.reshape(-1, 1)
        if self.mode == "lspg":
            sol = np.linalg.solve(Jh.T @ Jh, Jh.T @ rhs)
        else:
            # minres ops are already normal-equation data:
            # Jh = P^T (JV), Rh = P^T R with P = X^-1 JV
            sol = np.linalg.solve(Jh, rhs)
        corr, Bcols = sol[:, 0], sol[:, 1:]
        a = alpha - corr
        B = -Bcols if Bcols.size else np.zeros((self.n, self.k_loc))
        return a, B

    def _merit(self, alpha: np.ndarray, sl: np.ndarray) -> float:
        """Projection-consistent residual norm used for step control."""
        comp = self.comp
        R, _ = assemble(comp, self.full_state(alpha), need_jac=False)
        R = R + comp.neumann
        if self.k_loc:
            R = R + self.EC @ sl
        if self.mode == "galerkin":
            return float(np.linalg.norm(self.V.T @ R))
        if self.mode == "lspg":
            return float(np.linalg.norm(self.Y.T @ R))
        return comp.dual_norm(R[comp.free])

    def _damped_newton(self, alpha, sl, tol, maxit):
        """Line-searched model iteration; returns (alpha, merit, stalled)."""
        rn = self._merit(alpha, sl)
        for _ in range(maxit):
            a, B = self._affine_from(alpha)
            step = a + (B @ sl if self.k_loc else 0.0) - alpha
            t = 1.0
            trial, rt = alpha + step, math.inf
            for _ in range(10):
                trial = alpha + t * step
                rt = self._merit(trial, sl)
                if np.isfinite(rt) and (rt < rn or not np.isfinite(rn)):
                    break
                t *= 0.5
            if not np.isfinite(rt) or (rt >= rn and rn < math.inf):
                return alpha, rn, True
            alpha, rn = trial, rt
            if t * np.linalg.norm(step) <= tol * max(1.0, np.linalg.norm(alpha)):
                return alpha, rn, False
        return alpha, rn, False

    def _ptc(self, sl, dt0: float = 0.1, max_steps: int = 150):
        """Pseudo-transient relaxation of the reduced system from rest."""
        alpha = np.zeros(self.n)
        rn = self._merit(alpha, sl)
        r0 = max(rn, 1e-300)
        best_alpha, best_rn = alpha, rn
        dt = dt0
        for _ in range(max_steps):
            a, B = self._affine_from(alpha, dt=dt)
            trial = a + (B @ sl if self.k_loc else 0.0)
            rt = self._merit(trial, sl)
            if np.isfinite(rt) and rt < 1e3 * max(rn, r0):
                dt *= min(2.0, max(0.5, rn / max(rt, 1e-300)))
                alpha, rn = trial, rt
                if rt < best_rn:
                    best_alpha, best_rn = alpha, rt
                if rt <= 1e-12:
                    break
            else:
                dt *= 0.25
                if dt < 1e-10:
                    break
        return best_alpha

    def _branch_continuation(self, sl, tol, maxit):
        """March the physical branch from the Stokes limit up in Reynolds.

        The reduced residual norm has spurious stationary points that trap
        Newton started from rest; the Stokes solution is unique, and
        stepping up the Reynolds number from there keeps the iterates on
        the branch connected to it.
        """
        comp0 = self.comp
        alpha = np.zeros(self.n)
        try:
            for f in (0.0, 0.3, 0.6, 1.0):
                if f == 0.0:
                    self.comp = replace(comp0, convection=False)
                elif f < 1.0:
                    self.comp = replace(comp0, nu=comp0.nu / f)
                else:
                    self.comp = comp0
                alpha, _, _ = self._damped_newton(alpha, sl, tol, maxit)
        finally:
            self.comp = comp0
        return alpha, self._merit(alpha, sl)

    def solve_exact(self, s: np.ndarray, tol: float = 1e-10, maxit: int = 50) -> None:
        """Reduced nonlinear solve at fixed control.

        Line-searched Newton/Gauss-Newton from the current coefficients;
        if it stalls, Reynolds continuation from the Stokes limit re-tracks
        the physical branch, with pseudo-transient relaxation as a last
        resort.  The candidate with the smallest residual norm wins.
        """
        sl = self.local_control(s)
        alpha, rn, stalled = self._damped_newton(self.alpha.copy(), sl, tol, maxit)
        if stalled or rn > tol:
            alpha2, rn2 = self._branch_continuation(sl, tol, maxit)
            if rn2 < rn:
                alpha, rn = alpha2, rn2
        if stalled and rn > tol:
            relaxed = self._ptc(sl)
            alpha3, rn3, _ = self._damped_newton(relaxed, sl, tol, maxit)
            if rn3 < rn:
                alpha, rn = alpha3, rn3
        if not np.all(np.isfinite(alpha)):
            raise ReducedSolveError("reduced local solve diverged")
        self.alpha = alpha

    def prepare(self, s: np.ndarray, method: str) -> None:
        if method == "gnm":
            self.solve_exact(s)
        self.a_alpha, self.B_alpha = self._affine_from(self.alpha)
        if method == "gnm":
            self.a_alpha = self.alpha - self.B_alpha @ self.local_control(s)

    def trace_affine(self, port_index: int):
        cols, T = self.comp.trace_matrix_rows(port_index)
        lift_t = T @ self.comp.lift[cols]
        TV = T @ self.V[cols, :]
        t0 = lift_t + TV @ self.a_alpha
        TB = TV @ self.B_alpha if self.k_loc else np.zeros((T.shape[0], 0))
        return t0, TB, self._col_slices

    def trace_values(self, port_index: int) -> np.ndarray:
        return self.comp.trace_values(self.full_state(), port_index)

    def finalize(self, s: np.ndarray, method: str) -> None:
        if method == "sqp":
            self.alpha = self.a_alpha + self.B_alpha @ self.local_control(s)

    def residual_indicator(self, s: np.ndarray) -> float:
        comp = self.comp
        w = self.full_state()
        R, _ = assemble(comp, w, need_jac=False)
        R = R + comp.neumann
        if self.k_loc:
            R = R + self.EC @ self.local_control(s)
        return comp.dual_norm(R[comp.free])

    def projected_residual_norm(self, s: np.ndarray) -> float:
        """Norm of the reduced optimality residual at the current iterate."""
        Rh, Jh, Eh = self._reduced_ops(self.alpha)
        rhs = Rh + (Eh @ self.local_control(s) if self.k_loc else 0.0)
        if self.mode == "galerkin":
            return float(np.linalg.norm(rhs))
        if self.mode == "lspg":
            return float(np.linalg.norm(Jh.T @ rhs))
        return float(np.linalg.norm(rhs))


# ---------------------------------------------------------------------------
# standalone reduced solves

def galerkin_local_solve(comp: FlowComponent, layout: ControlLayout,
                         V: np.ndarray, beta: np.ndarray,
                         alpha0=None) -> np.ndarray:
    loc = RomLocal(comp, layout, V, mode="galerkin", alpha0=alpha0)
    loc.solve_exact(beta)
    return loc.alpha


def lspg_local_solve(comp: FlowComponent, layout: ControlLayout,
                     V: np.ndarray, beta: np.ndarray,
                     Y: np.ndarray | None = None, alpha0=None) -> np.ndarray:
    mode = "lspg" if Y is not None else "minres"
    loc = RomLocal(comp, layout, V, mode=mode, Y=Y, alpha0=alpha0)
    loc.solve_exact(beta)
    return loc.alpha


# ---------------------------------------------------------------------------
# test spaces and trial enrichment

def build_test_space(comp: FlowComponent, V: np.ndarray,
                     states: list[np.ndarray], j_es: int | None = None,
                     tag: str = "") -> ReducedBasis:
    """Empirical test space from Riesz representatives of J(w_k) V.

    For every snapshot state the Jacobian is applied to each trial mode
    and lifted through X^-1; POD under X compresses the pool to
    j_es = 2 * dim(V) modes by default.
    """
    if j_es is None:
        j_es = 2 * V.shape[1]
    free = comp.free
    lu = comp.x_free_lu()
    cols = []
    for w in states:
        _, J = assemble(comp, w)
        JVf = (J @ V)[free]
        psi = np.zeros((comp.n_dofs, V.shape[1]))
        psi[free] = lu.solve(JVf)
        cols.append(psi)
    pool = np.hstack(cols)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        basis = pod(pool, comp.X, j_es, tag=tag or "test-space")
    return basis


def enrichment_columns(comp: FlowComponent,
                       port_bases: dict[int, np.ndarray],
                       states: list[np.ndarray]) -> np.ndarray:
    """State perturbations of the linearized local system per port mode.

    For each snapshot state and each port control mode, solves the
    linearized full-order system for the homogeneous state that balances
    the port load at that state; returns the columns (possibly empty).
    """
    free = comp.free
    cols = []
    for w in states:
        R, J = assemble(comp, w)
        R = R + comp.neumann
        try:
            lu = splu(J[free][:, free].tocsc())
        except RuntimeError:
            warnings.warn("singular Jacobian at snapshot; skipped", stacklevel=2)
            continue
        base = w - comp.lift
        base_corr = base.copy()
        base_corr[free] += lu.solve(-R[free])
        for pi, W in port_bases.items():
            if pi not in comp.couplings:
                continue
            EW = (comp.couplings[pi].E @ W)[free]
            d = base_corr[:, None] + np.zeros((comp.n_dofs, W.shape[1]))
            d[free] += lu.solve(-np.asarray(EW))
            cols.append(d)
    if not cols:
        return np.zeros((comp.n_dofs, 0))
    return np.hstack(cols)


def enrich_trial_space(comp: FlowComponent, Z: np.ndarray,
                       port_bases: dict[int, np.ndarray],
                       states: list[np.ndarray], n_new: int) -> np.ndarray:
    """Append modes spanning the control-to-state sensitivity directions.

    The Z-orthogonal projections of the perturbation snapshots are
    compressed and appended, which restores full column rank of the
    condensed control sensitivity.
    """
    if n_new == 0 or not port_bases:
        return Z
    cols = enrichment_columns(comp, port_bases, states)
    if cols.shape[1] == 0:
        return Z
    return append_orthogonal_modes(Z, cols, comp.X, n_new,
                                   tag="trial-enrichment")


# ---------------------------------------------------------------------------
# reduced / hybrid interface solves

@dataclass
class RomSetup:
    """Per-component model assignment and bases for a hybrid solve."""

    state_bases: dict[int, np.ndarray] = field(default_factory=dict)
    test_bases: dict[int, np.ndarray] = field(default_factory=dict)
    modes: dict[int, str] = field(default_factory=dict)   # fom|galerkin|lspg|minres

    def mode_of(self, i: int) -> str:
        return self.modes.get(i, "lspg" if i in self.test_bases else
                              ("minres" if i in self.state_bases else "fom"))


def make_rom_locals(problem: DDProblem, setup: RomSetup, w0=None) -> list:
    locals_ = []
    for k, comp in enumerate(problem.comps):
        mode = setup.mode_of(comp.index)
        if mode == "fom":
            wi = None if w0 is None else w0[k]
            locals_.append(FomLocal(comp, problem.layout, w0=wi))
        else:
            Y = setup.test_bases.get(comp.index)
            locals_.append(RomLocal(comp, problem.layout,
                                    setup.state_bases[comp.index],
                                    mode=mode, Y=Y))
    return locals_


def rom_dd_solve(problem: DDProblem, setup: RomSetup, s0=None,
                 method: str = "sqp", tol: float = 1e-8, maxit: int = 50,
                 check_rank: bool = True) -> DDResult:
    """Interface optimization with reduced/hybrid local models."""
    locals_ = make_rom_locals(problem, setup)
    if check_rank:
        for loc in locals_:
            loc.prepare(np.zeros(problem.layout.n), "sqp")
        G, _ = condensed_system(problem, {loc.comp.index: loc for loc in locals_})
        sv = np.linalg.svd(G, compute_uv=False)
        if sv.size and sv[0] > 0 and sv[-1] / sv[0] < 1e-12:
            raise RankDeficiencyError(
                f"condensed control sensitivity is rank deficient "
                f"(sigma ratio {sv[-1] / sv[0]:.2e}); enrich the trial spaces"
            )
    return optimize(problem, locals_, s0=s0, method=method, tol=tol, maxit=maxit)


def condensed_sensitivity(problem: DDProblem, setup: RomSetup,
                          s: np.ndarray | None = None) -> np.ndarray:
    """Condensed jump-sensitivity matrix at a given control (for rank audits)."""
    locals_ = make_rom_locals(problem, setup)
    s = np.zeros(problem.layout.n) if s is None else s
    for loc in locals_:
        loc.prepare(s, "sqp")
    G, _ = condensed_system(problem, {loc.comp.index: loc for loc in locals_})
    return G


# ---------------------------------------------------------------------------
# error metrics

def eval_errors(rom_states: list[list[np.ndarray]],
                fom_states: list[list[np.ndarray]],
                comps: list[FlowComponent]) -> dict:
    """Average relative state errors per component over a test set."""
    n_comp = len(comps)
    acc = np.zeros(n_comp)
    for wr, wf in zip(rom_states, fom_states):
        for i in range(n_comp):
            den = comps[i].x_norm(wf[i])
            acc[i] += comps[i].x_norm(wr[i] - wf[i]) / max(den, 1e-300)
    acc /= max(len(rom_states), 1)
    return {"component": {comps[i].index: float(acc[i]) for i in range(n_comp)},
            "mean": float(acc.mean()) if n_comp else 0.0}


def eval_port_errors(rom_controls: list[np.ndarray],
                     fom_controls: list[np.ndarray],
                     layout: ControlLayout,
                     reference_layout: ControlLayout | None = None) -> dict:
    """Average relative control errors per port over a test set.

    Controls must be expressed in the same full trace coordinates; reduced
    controls should be expanded through their port bases first.
    """
    ref = reference_layout or layout
    out = {}
    for p in layout.ports:
        sl = ref.slices[p.index]
        S = ref.reg[p.index]
        errs = []
        for sr, sf in zip(rom_controls, fom_controls):
            d = sr[sl] - sf[sl]
            den = math.sqrt(max(sf[sl] @ (S @ sf[sl]), 1e-300))
            errs.append(math.sqrt(max(0.0, d @ (S @ d))) / den)
        out[p.index] = float(np.mean(errs))
    out["mean"] = float(np.mean([v for k, v in out.items() if k != "mean"]))
    return out

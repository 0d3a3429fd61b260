"""P2 triangular reference meshes, FE spaces, quadrature and norm matrices.

Meshes are structured triangulations of the archetype components built on
the reference (undeformed) geometry.  All fields (both velocity components
and pressure) use the same P2 nodal space.  Ports carry exactly
2*resolution + 1 trace nodes for every archetype, which makes decomposed
interfaces conforming by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import (
    ArchetypeLabel,
    BRANCH_LENGTH,
    CHANNEL_LENGTH,
    INLET_GROUP,
    _reference_port_endpoints,
    port_groups,
)

# ---------------------------------------------------------------------------
# quadrature

def _tri_quadrature() -> tuple[np.ndarray, np.ndarray]:
    # 12-point degree-6 rule on the reference triangle (0,0)-(1,0)-(0,1).
    rows = []
    def perm3(a, w):
        c = 1.0 - 2.0 * a
        for lam in ((a, a, c), (a, c, a), (c, a, a)):
            rows.append((*lam, w))
    def perm6(a, b, w):
        c = 1.0 - a - b
        for lam in ((a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)):
            rows.append((*lam, w))
    perm3(0.063089014491502, 0.050844906370207)
    perm3(0.249286745170910, 0.116786275726379)
    perm6(0.053145049844816, 0.310352451033785, 0.082851075618374)
    arr = np.array(rows)
    pts = arr[:, 1:3]              # (xi, eta) = (lambda_2, lambda_3)
    wts = 0.5 * arr[:, 3]          # weights sum to the reference area 1/2
    return pts, wts


TRI_QP, TRI_QW = _tri_quadrature()

# 3-point Gauss rule on [0, 1] (degree 5, exact for degree-4 trace integrands)
_g = math.sqrt(3.0 / 5.0)
SEG_QP = 0.5 * (1.0 + np.array([-_g, 0.0, _g]))
SEG_QW = 0.5 * np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])


# ---------------------------------------------------------------------------
# P2 shape functions

_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # barycentric gradients
_MID = ((0, 1), (1, 2), (2, 0))                           # midside node pairs


def p2_values(pts: np.ndarray) -> np.ndarray:
    """P2 basis values at reference points; shape (npts, 6)."""
    pts = np.atleast_2d(pts)
    lam = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
    out = np.empty((len(pts), 6))
    for i in range(3):
        out[:, i] = lam[:, i] * (2.0 * lam[:, i] - 1.0)
    for k, (a, b) in enumerate(_MID):
        out[:, 3 + k] = 4.0 * lam[:, a] * lam[:, b]
    return out


def p2_grads(pts: np.ndarray) -> np.ndarray:
    """P2 basis gradients in reference coordinates; shape (npts, 6, 2)."""
    pts = np.atleast_2d(pts)
    lam = np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
    out = np.empty((len(pts), 6, 2))
    for i in range(3):
        out[:, i, :] = (4.0 * lam[:, i] - 1.0)[:, None] * _DL[i]
    for k, (a, b) in enumerate(_MID):
        out[:, 3 + k, :] = 4.0 * (lam[:, a][:, None] * _DL[b] + lam[:, b][:, None] * _DL[a])
    return out


def p2_hessians() -> np.ndarray:
    """Constant reference Hessians of the P2 basis; shape (6, 2, 2)."""
    out = np.empty((6, 2, 2))
    for i in range(3):
        out[i] = 4.0 * np.outer(_DL[i], _DL[i])
    for k, (a, b) in enumerate(_MID):
        out[3 + k] = 4.0 * (np.outer(_DL[a], _DL[b]) + np.outer(_DL[b], _DL[a]))
    return out


P2_VALS = p2_values(TRI_QP)        # (nq, 6)
P2_GRADS = p2_grads(TRI_QP)        # (nq, 6, 2)
P2_HESS = p2_hessians()            # (6, 2, 2)


def p2_values_1d(xi: np.ndarray) -> np.ndarray:
    """1D P2 basis on [0,1] with nodes (0, 1/2, 1); shape (npts, 3)."""
    xi = np.atleast_1d(xi)
    return np.column_stack([
        2.0 * (xi - 0.5) * (xi - 1.0),
        -4.0 * xi * (xi - 1.0),
        2.0 * xi * (xi - 0.5),
    ])


def p2_grads_1d(xi: np.ndarray) -> np.ndarray:
    xi = np.atleast_1d(xi)
    return np.column_stack([4.0 * xi - 3.0, 4.0 - 8.0 * xi, 4.0 * xi - 1.0])


# ---------------------------------------------------------------------------
# structured mesh generation

class MeshResolutionError(ValueError):
    pass


def _refine(a: np.ndarray) -> np.ndarray:
    """Insert midpoints: length n+1 -> 2n+1."""
    out = np.empty(2 * len(a) - 1)
    out[0::2] = a
    out[1::2] = 0.5 * (a[:-1] + a[1:])
    return out


@dataclass
class FEMesh:
    """6-node P2 triangulation of one archetype reference component."""

    label: ArchetypeLabel        # shape label (junction/channel reference)
    resolution: int
    nodes: np.ndarray            # (nn, 2) reference coordinates
    tris: np.ndarray             # (n_el, 6): 3 vertices then midsides 01, 12, 20
    groups: dict[int, np.ndarray] = field(default_factory=dict)
    # groups[g]: (n_edge, 3) boundary edges (end, mid, end) in face group g

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.tris)


class _GridPatch:
    """Rectangular cell patch on the P2 fine grid with a node-id lookup."""

    def __init__(self, fx, fy, nid):
        self.fx, self.fy, self.nid = fx, fy, nid
        self.ncx = (len(fx) - 1) // 2
        self.ncy = (len(fy) - 1) // 2

    def triangles(self):
        tris = []
        for J in range(self.ncy):
            for I in range(self.ncx):
                i, j = 2 * I, 2 * J
                n = self.nid
                tris.append([n(i, j), n(i + 2, j), n(i + 2, j + 2),
                             n(i + 1, j), n(i + 2, j + 1), n(i + 1, j + 1)])
                tris.append([n(i, j), n(i + 2, j + 2), n(i, j + 2),
                             n(i + 1, j + 1), n(i + 1, j + 2), n(i, j + 1)])
        return tris

    def edge_row(self, j, i_cells):
        n = self.nid
        return [[n(2 * I, j), n(2 * I + 1, j), n(2 * I + 2, j)] for I in i_cells]

    def edge_col(self, i, j_cells):
        n = self.nid
        return [[n(i, 2 * J), n(i, 2 * J + 1), n(i, 2 * J + 2)] for J in j_cells]


def rectangle_mesh(
    xs: np.ndarray, ys: np.ndarray,
    groups_spec: dict[int, str] | None = None,
) -> FEMesh:
    """Structured P2 mesh of a tensor-product rectangle.

    ``groups_spec`` maps face-group ids to sides 'left'/'right'/'bottom'/'top';
    default numbering is 1/2/3/4 as for the channel archetype.
    """
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    fx, fy = _refine(xs), _refine(ys)
    nfx = len(fx)
    coords = np.column_stack([np.tile(fx, len(fy)), np.repeat(fy, nfx)])
    patch = _GridPatch(fx, fy, lambda i, j: j * nfx + i)
    tris = np.array(patch.triangles(), dtype=np.intp)
    if groups_spec is None:
        groups_spec = {1: "left", 2: "right", 3: "bottom", 4: "top"}
    groups = {}
    for g, side in groups_spec.items():
        if side == "left":
            e = patch.edge_col(0, range(patch.ncy))
        elif side == "right":
            e = patch.edge_col(len(fx) - 1, range(patch.ncy))
        elif side == "bottom":
            e = patch.edge_row(0, range(patch.ncx))
        else:
            e = patch.edge_row(len(fy) - 1, range(patch.ncx))
        groups[g] = np.array(e, dtype=np.intp)
    return FEMesh(label=ArchetypeLabel.CHANNEL, resolution=len(ys) - 1,
                  nodes=coords, tris=tris, groups=groups)


def _channel_mesh(res: int) -> FEMesh:
    # Axial density is half the cross-duct density; this puts the node
    # count near the target scale while keeping well-shaped elements.
    k = -(-res // 2)
    xs = np.linspace(0.0, CHANNEL_LENGTH, 3 * k + 1)
    ys = np.linspace(0.0, 1.0, res + 1)
    m = rectangle_mesh(xs, ys)
    m.resolution = res
    return m


def _junction_mesh(res: int) -> FEMesh:
    k = -(-res // 2)
    xs = np.concatenate([
        np.linspace(0.0, 1.0, k + 1),
        np.linspace(1.0, 2.0, res + 1)[1:],
        np.linspace(2.0, 3.0, k + 1)[1:],
    ])
    ys = np.linspace(0.0, 1.0, res + 1)
    fx, fy = _refine(xs), _refine(ys)
    nfx, nfy = len(fx), len(fy)
    main = _GridPatch(fx, fy, lambda i, j: j * nfx + i)
    main_nodes = np.column_stack([np.tile(fx, nfy), np.repeat(fy, nfx)])

    nb = round(BRANCH_LENGTH * res)
    bs = _refine(np.linspace(1.0, 2.0, res + 1))          # branch x positions
    bt = _refine(np.linspace(1.0, 1.0 + BRANCH_LENGTH, nb + 1))
    nbx = len(bs)
    i0 = 2 * k                                            # fine index of x=1 in main grid
    n_main = len(main_nodes)
    top_row = (nfy - 1) * nfx

    def bid(i, j):
        if j == 0:
            return top_row + i0 + i
        return n_main + (j - 1) * nbx + i

    branch = _GridPatch(bs, bt, bid)
    extra = np.column_stack([
        np.tile(bs, len(bt) - 1),
        np.repeat(bt[1:], nbx),
    ])
    nodes = np.vstack([main_nodes, extra])
    tris = np.array(main.triangles() + branch.triangles(), dtype=np.intp)

    ncx_main = main.ncx
    groups = {
        1: np.array(main.edge_col(0, range(main.ncy)), dtype=np.intp),
        4: np.array(main.edge_col(nfx - 1, range(main.ncy)), dtype=np.intp),
        2: np.array(main.edge_row(0, range(ncx_main)), dtype=np.intp),
        3: np.array(main.edge_row(nfy - 1, range(k)), dtype=np.intp),
        5: np.array(main.edge_row(nfy - 1, range(k + res, ncx_main)), dtype=np.intp),
        6: np.array(branch.edge_col(0, range(branch.ncy)), dtype=np.intp),
        8: np.array(branch.edge_col(nbx - 1, range(branch.ncy)), dtype=np.intp),
        7: np.array(branch.edge_row(2 * nb, range(branch.ncx)), dtype=np.intp),
    }
    return FEMesh(label=ArchetypeLabel.JUNCTION, resolution=res,
                  nodes=nodes, tris=tris, groups=groups)


def reference_mesh(label: ArchetypeLabel, resolution: int) -> FEMesh:
    """Structured P2 mesh of the reference component."""
    if resolution < 2:
        raise MeshResolutionError(f"resolution must be >= 2, got {resolution}")
    if label.is_junction:
        return _junction_mesh(resolution)
    return _channel_mesh(resolution)


# ---------------------------------------------------------------------------
# element geometry (affine P1 element maps, P2 fields)

@dataclass
class ElementGeometry:
    det: np.ndarray       # (n_el,) Jacobian determinants
    inv_jt: np.ndarray    # (n_el, 2, 2) inverse-transpose Jacobians
    wq: np.ndarray        # (n_el, nq) physical quadrature weights
    grads: np.ndarray     # (n_el, nq, 6, 2) physical basis gradients
    lap: np.ndarray       # (n_el, 6) physical basis Laplacians (constant per element)
    h: np.ndarray         # (n_el,) circumdiameters


def element_geometry(coords: np.ndarray, tris: np.ndarray) -> ElementGeometry:
    """Precompute affine element maps from vertex coordinates."""
    v0 = coords[tris[:, 0]]
    e1 = coords[tris[:, 1]] - v0
    e2 = coords[tris[:, 2]] - v0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise ValueError("degenerate or inverted element")
    inv_jt = np.empty((len(tris), 2, 2))
    inv_jt[:, 0, 0] = e2[:, 1] / det
    inv_jt[:, 0, 1] = -e1[:, 1] / det
    inv_jt[:, 1, 0] = -e2[:, 0] / det
    inv_jt[:, 1, 1] = e1[:, 0] / det
    wq = det[:, None] * TRI_QW[None, :]
    grads = np.einsum("eij,qbj->eqbi", inv_jt, P2_GRADS)
    # Hessian of an affine-mapped P2 basis: J^-T H_ref J^-1 (constant)
    hess = np.einsum("eik,bkl,ejl->ebij", inv_jt, P2_HESS, inv_jt)
    lap = hess[:, :, 0, 0] + hess[:, :, 1, 1]
    a = np.linalg.norm(e1, axis=1)
    b = np.linalg.norm(e2, axis=1)
    c = np.linalg.norm(e2 - e1, axis=1)
    h = a * b * c / det
    return ElementGeometry(det=det, inv_jt=inv_jt, wq=wq, grads=grads, lap=lap, h=h)


def scalar_matrices(coords: np.ndarray, tris: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """P2 stiffness and mass matrices of a scalar field."""
    geo = element_geometry(coords, tris)
    n = len(coords)
    ke = np.einsum("eq,eqai,eqbi->eab", geo.wq, geo.grads, geo.grads)
    me = np.einsum("eq,qa,qb->eab", geo.wq, P2_VALS, P2_VALS)
    rows = np.repeat(tris, 6, axis=1).ravel()
    cols = np.tile(tris, (1, 6)).ravel()
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((me.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return K, M


# ---------------------------------------------------------------------------
# FE space

class FaceGroupError(ValueError):
    pass


@dataclass
class TraceQuad:
    """Ordered port trace with its 1D quadrature and evaluation matrix."""

    nodes: np.ndarray     # trace node ids, ordered by curvilinear coordinate
    xi: np.ndarray        # (nq,) curvilinear quadrature coordinates in [0,1]
    w_ref: np.ndarray     # (nq,) weights on the unit reference port
    B: np.ndarray         # (nq, n_trace) evaluation of nodal values at x_q


def _ordered_group_nodes(mesh: FEMesh, group: int) -> np.ndarray:
    edges = mesh.groups[group]
    nodes = np.unique(edges)
    a, b = _reference_port_endpoints(mesh.label, group) if group in (1, 2, 4, 7) \
        else (mesh.nodes[nodes[0]], mesh.nodes[nodes[-1]])
    d = np.asarray(b) - np.asarray(a)
    t = mesh.nodes[nodes] @ d
    return nodes[np.argsort(t, kind="stable")]


@dataclass
class FESpace:
    """Equal-order P2 space for (u_x, u_y, p) on one archetype component."""

    label: ArchetypeLabel           # includes the inflow/internal variant
    mesh: FEMesh
    port_nodes: dict[int, np.ndarray] = field(default_factory=dict)
    inlet_nodes: np.ndarray | None = None
    wall_nodes: np.ndarray = None
    dirichlet_velocity_nodes: np.ndarray = None

    def __post_init__(self):
        ports = port_groups(self.label)
        for g in ports:
            self.port_nodes[g] = _ordered_group_nodes(self.mesh, g)
        wall = []
        for g, edges in self.mesh.groups.items():
            if g in ports:
                continue
            if self.label.is_inflow and g == INLET_GROUP:
                self.inlet_nodes = _ordered_group_nodes(self.mesh, g)
                continue
            wall.append(np.unique(edges))
        self.wall_nodes = np.unique(np.concatenate(wall)) if wall else np.array([], np.intp)
        dn = [self.wall_nodes]
        if self.inlet_nodes is not None:
            dn.append(self.inlet_nodes)
        self.dirichlet_velocity_nodes = np.unique(np.concatenate(dn))

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_dofs(self) -> int:
        return 3 * self.mesh.n_nodes

    def dof(self, comp: int, nodes) -> np.ndarray:
        """Global dof ids of field component comp (0=u_x, 1=u_y, 2=p)."""
        return comp * self.n_nodes + np.asarray(nodes, dtype=np.intp)

    @property
    def dirichlet_dofs(self) -> np.ndarray:
        dn = self.dirichlet_velocity_nodes
        return np.concatenate([self.dof(0, dn), self.dof(1, dn)])

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)


def make_space(label: ArchetypeLabel, resolution: int) -> FESpace:
    return FESpace(label=label, mesh=reference_mesh(label.reference, resolution))


def port_trace(space: FESpace, group: int) -> TraceQuad:
    """Ordered trace dofs + quadrature of one port of the component."""
    if group not in space.port_nodes:
        raise FaceGroupError(f"group {group} is not a port of {space.label.value}")
    nodes = space.port_nodes[group]
    n_el = (len(nodes) - 1) // 2
    dx = 1.0 / n_el
    xi = (np.arange(n_el)[:, None] * dx + SEG_QP[None, :] * dx).ravel()
    w = np.tile(SEG_QW * dx, n_el)
    vals = p2_values_1d(SEG_QP)                 # (3, 3) local values
    B = np.zeros((3 * n_el, len(nodes)))
    for e in range(n_el):
        B[3 * e:3 * e + 3, 2 * e:2 * e + 3] = vals
    return TraceQuad(nodes=nodes, xi=xi, w_ref=w, B=B)


def segment_matrices_1d(n_nodes: int, length: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """1D P2 stiffness and mass matrices on a uniform segment."""
    n_el = (n_nodes - 1) // 2
    he = length / n_el
    K = np.zeros((n_nodes, n_nodes))
    M = np.zeros((n_nodes, n_nodes))
    gp, gw = SEG_QP, SEG_QW
    vals = p2_values_1d(gp)
    ders = p2_grads_1d(gp)
    ke = np.einsum("q,qa,qb->ab", gw / he, ders, ders)
    me = np.einsum("q,qa,qb->ab", gw * he, vals, vals)
    for e in range(n_el):
        s = slice(2 * e, 2 * e + 3)
        K[s, s] += ke
        M[s, s] += me
    return K, M


def assemble_norms(space: FESpace) -> tuple[sp.csr_matrix, np.ndarray]:
    """Component norm matrix X and unit-port control norm matrix.

    X = blockdiag(K + M, K + M, M): H1+L2 on each velocity component, L2 on
    pressure, assembled on the reference (undeformed) mesh, so there is one
    X per archetype shape independent of the geometric parameters.  The
    port norm is tangential-H1 + L2 on g and L2 on h.
    """
    K, M = scalar_matrices(space.mesh.nodes, space.mesh.tris)
    X = sp.block_diag([K + M, K + M, M], format="csr")
    n_t = 2 * space.mesh.resolution + 1
    K1, M1 = segment_matrices_1d(n_t)
    S = np.zeros((3 * n_t, 3 * n_t))
    S[:n_t, :n_t] = K1 + M1
    S[n_t:2 * n_t, n_t:2 * n_t] = K1 + M1
    S[2 * n_t:, 2 * n_t:] = M1
    return X, S

"""Manufactured two-component Stokes problem on the unit square.

The unit square is split at x = 0.5 into two components coupled through a
single vertical port.  The flow is driven by a parabolic inlet profile on
the left edge and the body force f = (x_1, cos(x_2^2)); the right edge is
a natural outflow boundary.  Used by the interface-control refinement
study and the zero-objective optimality tests.
"""

from __future__ import annotations

import numpy as np

from .geometry import ArchetypeLabel, GeomParams, Port
from .mesh import FESpace, rectangle_mesh
from .fem import FlowComponent, _coupling_for


def body_force(x: np.ndarray) -> np.ndarray:
    return np.column_stack([x[:, 0], np.cos(x[:, 1] ** 2)])


def inlet_profile(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def build_stokes_pair(n_cells: int, nu: float = 1.0):
    """Two coupled Stokes components on (0, 0.5) x (0, 1) and (0.5, 1) x (0, 1).

    ``n_cells`` is the number of cells across the unit square in each
    direction (even); returns ([left, right], port).
    """
    if n_cells < 2 or n_cells % 2:
        raise ValueError("n_cells must be an even number >= 2")
    ys = np.linspace(0.0, 1.0, n_cells + 1)
    half = n_cells // 2
    mesh_l = rectangle_mesh(np.linspace(0.0, 0.5, half + 1), ys)
    mesh_r = rectangle_mesh(np.linspace(0.5, 1.0, half + 1), ys)
    space_l = FESpace(label=ArchetypeLabel.INFLOW_CHANNEL, mesh=mesh_l)
    space_r = FESpace(label=ArchetypeLabel.CHANNEL, mesh=mesh_r)

    left = FlowComponent(space=space_l, coords=mesh_l.nodes.copy(), nu=nu,
                         convection=False, body_force=body_force,
                         index=0, mu=GeomParams())
    lift = np.zeros(left.n_dofs)
    lift[space_l.inlet_nodes] = inlet_profile(mesh_l.nodes[space_l.inlet_nodes, 1])
    left.lift = lift
    right = FlowComponent(space=space_r, coords=mesh_r.nodes.copy(), nu=nu,
                          convection=False, body_force=body_force,
                          index=1, mu=GeomParams())

    port = Port(index=0, up=(0, 2), down=(1, 1),
                endpoints=np.array([[0.5, 0.0], [0.5, 1.0]]),
                omega=0.0, length=1.0, flip_down=False)
    left.couplings[0] = _coupling_for(space_l, port, 0)
    right.couplings[0] = _coupling_for(space_r, port, 1)
    return [left, right], port

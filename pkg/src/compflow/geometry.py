"""Archetype components, parametric mappings and network instantiation.

A flow network is assembled from four archetype components: a straight
channel, a channel with a smooth bottom bump, and a T-junction with an
inclined branch, each in an "inflow" variant (Dirichlet inlet on face
group 1) and an internal variant (port on face group 1).  Every component
is obtained from its reference shape by a deformation (bump height h_c or
branch angle alpha) followed by scaling, rotation and translation.  Ports
are straight segments of reference length 1; the instantiated length is
gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Reference dimensions shared by all archetypes.  The main duct is a
# rectangle of length 3 and unit width; the junction branch is a unit-width
# duct of length BRANCH_LENGTH attached on top of the main duct over
# x in [1, 2].
CHANNEL_LENGTH = 3.0
BRANCH_LENGTH = 1.5
BUMP_EXPONENT = 4

# Validation ranges.  The bump must not pinch the duct and the branch must
# not fold over; both bounds are generous relative to the test ranges
# (h_c in [0.1, 0.3], alpha in [pi/8, pi/6]).
H_C_MAX = 0.45
ALPHA_MAX = math.pi / 4


class ArchetypeLabel(Enum):
    """The four archetype components."""

    INFLOW_CHANNEL = "inflow_channel"
    CHANNEL = "channel"
    INFLOW_JUNCTION = "inflow_junction"
    JUNCTION = "junction"

    @property
    def is_inflow(self) -> bool:
        return self in (ArchetypeLabel.INFLOW_CHANNEL, ArchetypeLabel.INFLOW_JUNCTION)

    @property
    def is_junction(self) -> bool:
        return self in (ArchetypeLabel.INFLOW_JUNCTION, ArchetypeLabel.JUNCTION)

    @property
    def reference(self) -> "ArchetypeLabel":
        """Shape-wise equivalent label (inflow variants share the geometry)."""
        if self.is_junction:
            return ArchetypeLabel.JUNCTION
        return ArchetypeLabel.CHANNEL


# Face-group numbering.  Channel: 1 = left end, 2 = right end, 3 = bottom
# wall, 4 = top wall.  Junction: 1 = left end, 4 = right end, 7 = branch
# end; 2 = bottom wall, 3 = top wall left of the branch, 5 = top wall right
# of the branch, 6/8 = left/right branch walls.
CHANNEL_GROUPS = (1, 2, 3, 4)
JUNCTION_GROUPS = (1, 2, 3, 4, 5, 6, 7, 8)

# Ports through which a component can be coupled, and the subset that acts
# as an outlet (flow leaves through them when the component is traversed
# left to right).
_PORT_GROUPS = {
    ArchetypeLabel.INFLOW_CHANNEL: (2,),
    ArchetypeLabel.CHANNEL: (1, 2),
    ArchetypeLabel.INFLOW_JUNCTION: (4, 7),
    ArchetypeLabel.JUNCTION: (1, 4, 7),
}
_OUTLET_GROUPS = {
    ArchetypeLabel.INFLOW_CHANNEL: (2,),
    ArchetypeLabel.CHANNEL: (2,),
    ArchetypeLabel.INFLOW_JUNCTION: (4, 7),
    ArchetypeLabel.JUNCTION: (4, 7),
}
INLET_GROUP = 1


class ParameterDomainError(ValueError):
    """Geometric parameter outside its admissible range."""


class GeometryMismatchError(ValueError):
    """Connected port endpoints do not coincide."""


def port_groups(label: ArchetypeLabel) -> tuple[int, ...]:
    return _PORT_GROUPS[label]


def outlet_groups(label: ArchetypeLabel) -> tuple[int, ...]:
    return _OUTLET_GROUPS[label]


@dataclass(frozen=True)
class GeomParams:
    """Geometric parameters mu of one component.

    gamma scales the component, theta rotates it, shift translates it.
    alpha is the branch inclination of a junction (from vertical, toward
    the outlet); h_c is the bump height of a channel.
    """

    gamma: float = 1.0
    theta: float = 0.0
    shift: tuple[float, float] = (0.0, 0.0)
    alpha: float | None = None
    h_c: float | None = None

    def validate(self, label: ArchetypeLabel) -> None:
        if not self.gamma > 0:
            raise ParameterDomainError(f"gamma must be positive, got {self.gamma}")
        if label.is_junction:
            if self.h_c is not None:
                raise ParameterDomainError("h_c is a channel parameter")
            a = self.alpha if self.alpha is not None else 0.0
            if not 0.0 <= a <= ALPHA_MAX:
                raise ParameterDomainError(
                    f"alpha must lie in [0, {ALPHA_MAX:.4f}], got {a}"
                )
        else:
            if self.alpha is not None:
                raise ParameterDomainError("alpha is a junction parameter")
            h = self.h_c if self.h_c is not None else 0.0
            if not 0.0 <= h <= H_C_MAX:
                raise ParameterDomainError(
                    f"h_c must lie in [0, {H_C_MAX}], got {h}"
                )

    def to_dict(self) -> dict:
        d = {"gamma": self.gamma, "theta": self.theta, "shift": list(self.shift)}
        if self.alpha is not None:
            d["alpha"] = self.alpha
        if self.h_c is not None:
            d["h_c"] = self.h_c
        return d

    @staticmethod
    def from_dict(d: dict) -> "GeomParams":
        return GeomParams(
            gamma=float(d.get("gamma", 1.0)),
            theta=float(d.get("theta", 0.0)),
            shift=tuple(float(v) for v in d.get("shift", (0.0, 0.0))),
            alpha=None if d.get("alpha") is None else float(d["alpha"]),
            h_c=None if d.get("h_c") is None else float(d["h_c"]),
        )


def rot2(theta: float) -> np.ndarray:
    """2x2 counterclockwise rotation matrix."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_matrix(theta: float) -> np.ndarray:
    """3x3 frame rotation A(theta): rotates (u_x, u_y), fixes p."""
    A = np.eye(3)
    A[:2, :2] = rot2(theta)
    return A


def branch_direction(alpha: float) -> np.ndarray:
    """Reference-frame axis of the junction branch (alpha from vertical)."""
    return np.array([math.sin(alpha), math.cos(alpha)])


def _deform_channel(pts: np.ndarray, h_c: float) -> np.ndarray:
    # Bottom boundary becomes y = -h_c (4t(1-t))^4, t = x / length; the
    # deformation is blended linearly in y so the top wall and the two end
    # ports are unaffected.
    t = pts[:, 0] / CHANNEL_LENGTH
    b = h_c * (4.0 * t * (1.0 - t)) ** BUMP_EXPONENT
    out = pts.copy()
    out[:, 1] = pts[:, 1] - (1.0 - pts[:, 1]) * b
    return out

def _deform_junction(pts: np.ndarray, alpha: float) -> np.ndarray:
    # The branch (y >= 1) is sheared toward the outlet: its axis tilts by
    # alpha from vertical while the end port stays straight, of unit
    # length, and perpendicular to the axis.  Points with y <= 1 are fixed,
    # so the blend is continuous across the attachment line.
    out = pts.copy()
    up = pts[:, 1] > 1.0
    if not np.any(up) or alpha == 0.0:
        return out
    s = pts[up, 0] - 1.0
    t = (pts[up, 1] - 1.0) / BRANCH_LENGTH
    d = branch_direction(alpha)
    that = np.array([d[1], -d[0]])
    mid = np.array([1.5, 1.0])
    top = mid + BRANCH_LENGTH * d + np.outer(s - 0.5, that)
    base = np.column_stack([1.0 + s, np.ones_like(s)])
    out[up] = (1.0 - t)[:, None] * base + t[:, None] * top
    return out


@dataclass(frozen=True)
class ComponentMap:
    """Mapping Phi from the reference component onto the physical one.

    Composition order is fixed: deform, then scale by gamma, then rotate
    by theta, then translate by shift.
    """

    label: ArchetypeLabel
    mu: GeomParams

    def deform(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.label.is_junction:
            return _deform_junction(pts, self.mu.alpha or 0.0)
        return _deform_channel(pts, self.mu.h_c or 0.0)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = self.deform(pts)
        out = self.mu.gamma * out @ rot2(self.mu.theta).T
        return out + np.asarray(self.mu.shift)


def instantiate_component(label: ArchetypeLabel, mu: GeomParams) -> ComponentMap:
    """Validate mu and return the mapping Phi for one component."""
    mu.validate(label)
    return ComponentMap(label, mu)


def _reference_port_endpoints(label: ArchetypeLabel, group: int) -> np.ndarray:
    """Undeformed endpoints, ordered by the reference curvilinear coordinate."""
    L = CHANNEL_LENGTH
    if group == 1:
        return np.array([[0.0, 0.0], [0.0, 1.0]])
    if group in (2, 4):
        return np.array([[L, 0.0], [L, 1.0]])
    if group == 7 and label.is_junction:
        return np.array([[1.0, 1.0 + BRANCH_LENGTH], [2.0, 1.0 + BRANCH_LENGTH]])
    raise ValueError(f"group {group} is not a port of {label.value}")


def port_endpoints(label: ArchetypeLabel, mu: GeomParams, group: int) -> np.ndarray:
    """Physical endpoints of a port, ordered by curvilinear coordinate."""
    return instantiate_component(label, mu)(_reference_port_endpoints(label, group))


def port_normal_angle(label: ArchetypeLabel, mu: GeomParams, group: int) -> float:
    """Angle of the downstream (outflow-directed) unit normal of a port."""
    if group == 7:
        d = rot2(mu.theta) @ branch_direction(mu.alpha or 0.0)
    else:
        d = rot2(mu.theta) @ np.array([1.0, 0.0])
    return math.atan2(d[1], d[0])


@dataclass(frozen=True)
class Port:
    """An internal interface shared by an upstream and a downstream component.

    Orientation follows the downstream normal n+ of the upstream owner;
    omega is its angle.  ``flip_down`` records whether the downstream
    owner's own trace ordering runs opposite to the upstream one.
    """

    index: int
    up: tuple[int, int]    # (component index, face group)
    down: tuple[int, int]
    endpoints: np.ndarray  # (2, 2), upstream trace order
    omega: float
    length: float
    flip_down: bool

    def owners(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return (self.up, self.down)

    def sign(self, comp: int) -> int:
        # Coupling sign sigma: -1 for the upstream owner, +1 downstream.
        if comp == self.up[0]:
            return -1
        if comp == self.down[0]:
            return 1
        raise KeyError(f"component {comp} does not own port {self.index}")


@dataclass
class NetworkConfig:
    """Plain description of a network: component list + connectivity."""

    components: list[tuple[ArchetypeLabel, GeomParams]]
    connections: list[tuple[int, int, int, int]]  # (i, port_i, j, port_j)
    Re: float = 100.0
    Re_ref: float = 100.0

    def to_dict(self) -> dict:
        return {
            "components": [
                {"label": lab.value, **mu.to_dict()} for lab, mu in self.components
            ],
            "connections": [list(c) for c in self.connections],
            "Re": self.Re,
            "Re_ref": self.Re_ref,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        comps = []
        for cd in d["components"]:
            lab = ArchetypeLabel(cd["label"])
            comps.append((lab, GeomParams.from_dict(cd)))
        conns = [tuple(int(v) for v in c) for c in d.get("connections", [])]
        return NetworkConfig(
            components=comps,
            connections=conns,
            Re=float(d.get("Re", 100.0)),
            Re_ref=float(d.get("Re_ref", 100.0)),
        )


@dataclass
class Network:
    """Instantiated network: maps, ports, orientations, free outlets."""

    config: NetworkConfig
    maps: list[ComponentMap]
    ports: list[Port]
    free_outlets: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.maps)

    @property
    def Re(self) -> float:
        return self.config.Re

    @property
    def Re_ref(self) -> float:
        return self.config.Re_ref

    def label(self, i: int) -> ArchetypeLabel:
        return self.config.components[i][0]

    def mu(self, i: int) -> GeomParams:
        return self.config.components[i][1]

    def ports_of(self, i: int) -> list[Port]:
        return [p for p in self.ports if i in (p.up[0], p.down[0])]


GEOM_TOL = 1e-12


def build_network(config: NetworkConfig) -> Network:
    """Instantiate all components and resolve port adjacency.

    Each connection must join an outlet port of one component to the inlet
    port (face group 1) of an internal component; the endpoints must
    coincide to within the geometric tolerance, scaled by the port length.
    """
    n_inflow = sum(1 for lab, _ in config.components if lab.is_inflow)
    if n_inflow != 1:
        raise GeometryMismatchError(
            f"network must contain exactly one inflow component, found {n_inflow}"
        )
    maps = [instantiate_component(lab, mu) for lab, mu in config.components]

    ports: list[Port] = []
    used: set[tuple[int, int]] = set()
    for k, (i, gi, j, gj) in enumerate(config.connections):
        for idx, g in ((i, gi), (j, gj)):
            if not 0 <= idx < len(maps):
                raise GeometryMismatchError(f"connection {k}: no component {idx}")
            if g not in port_groups(config.components[idx][0]):
                raise GeometryMismatchError(
                    f"connection {k}: group {g} is not a port of component {idx}"
                )
            if (idx, g) in used:
                raise GeometryMismatchError(
                    f"connection {k}: port ({idx}, {g}) already connected"
                )
            used.add((idx, g))
        # Orient the connection: the side offering an outlet group is
        # upstream, the side offering its inlet (group 1) is downstream.
        if gj == INLET_GROUP and gi in outlet_groups(config.components[i][0]):
            up, down = (i, gi), (j, gj)
        elif gi == INLET_GROUP and gj in outlet_groups(config.components[j][0]):
            up, down = (j, gj), (i, gi)
        else:
            raise GeometryMismatchError(
                f"connection {k}: must join an outlet port to an inlet port"
            )
        lab_u, mu_u = config.components[up[0]]
        lab_d, mu_d = config.components[down[0]]
        ep_u = port_endpoints(lab_u, mu_u, up[1])
        ep_d = port_endpoints(lab_d, mu_d, down[1])
        length = float(np.linalg.norm(ep_u[1] - ep_u[0]))
        tol = GEOM_TOL * max(1.0, length)
        if np.allclose(ep_u, ep_d, rtol=0.0, atol=tol):
            flip = False
        elif np.allclose(ep_u, ep_d[::-1], rtol=0.0, atol=tol):
            flip = True
        else:
            raise GeometryMismatchError(
                f"connection {k}: port endpoints do not coincide "
                f"({ep_u.tolist()} vs {ep_d.tolist()})"
            )
        omega = port_normal_angle(lab_u, mu_u, up[1])
        ports.append(
            Port(index=len(ports), up=up, down=down, endpoints=ep_u,
                 omega=omega, length=length, flip_down=flip)
        )

    free = []
    for idx, (lab, _) in enumerate(config.components):
        for g in outlet_groups(lab):
            if (idx, g) not in used:
                free.append((idx, g))
    return Network(config=config, maps=maps, ports=ports, free_outlets=free)


def attach_downstream(
    parent_label: ArchetypeLabel,
    parent_mu: GeomParams,
    parent_port: int,
    child_label: ArchetypeLabel,
    alpha: float | None = None,
    h_c: float | None = None,
) -> GeomParams:
    """Parameters that glue the child's inlet port onto a parent outlet.

    The child inherits the parent's scale (ports must have equal length).
    Its rotation aligns the inlet normal with the parent's outflow normal;
    the shift is fixed by matching the port endpoints.
    """
    if parent_port not in outlet_groups(parent_label):
        raise GeometryMismatchError(f"group {parent_port} is not an outlet port")
    gamma = parent_mu.gamma
    theta = port_normal_angle(parent_label, parent_mu, parent_port)
    a, b = port_endpoints(parent_label, parent_mu, parent_port)
    # Child inlet endpoints are shift and shift + gamma R(theta) e_y; pick
    # the parent endpoint for which the other endpoint matches.
    ey = gamma * (rot2(theta) @ np.array([0.0, 1.0]))
    if np.allclose(a + ey, b, rtol=0.0, atol=1e-9 * max(1.0, gamma)):
        shift = a
    else:
        shift = b
    return GeomParams(
        gamma=gamma, theta=theta, shift=(float(shift[0]), float(shift[1])),
        alpha=alpha, h_c=h_c,
    )


def chain_config(
    n: int, Re: float = 100.0, Re_ref: float = 100.0,
    h_c: float | None = None, gamma: float = 1.0,
) -> NetworkConfig:
    """A straight left-to-right chain: inflow channel + (n-1) channels."""
    comps: list[tuple[ArchetypeLabel, GeomParams]] = [
        (ArchetypeLabel.INFLOW_CHANNEL, GeomParams(gamma=gamma, h_c=h_c))
    ]
    conns = []
    for i in range(1, n):
        lab_p, mu_p = comps[i - 1]
        port_p = 2
        mu = attach_downstream(lab_p, mu_p, port_p, ArchetypeLabel.CHANNEL, h_c=h_c)
        comps.append((ArchetypeLabel.CHANNEL, mu))
        conns.append((i - 1, port_p, i, 1))
    return NetworkConfig(components=comps, connections=conns, Re=Re, Re_ref=Re_ref)


def branching_config(
    Re: float = 100.0, Re_ref: float = 100.0,
    h_c: float = 0.2, alpha: float = math.pi / 6,
) -> NetworkConfig:
    """Four-component target network: inflow channel, junction, two channels."""
    c0 = (ArchetypeLabel.INFLOW_CHANNEL, GeomParams(h_c=h_c))
    mu1 = attach_downstream(c0[0], c0[1], 2, ArchetypeLabel.JUNCTION, alpha=alpha)
    c1 = (ArchetypeLabel.JUNCTION, mu1)
    mu2 = attach_downstream(c1[0], mu1, 4, ArchetypeLabel.CHANNEL, h_c=h_c)
    c2 = (ArchetypeLabel.CHANNEL, mu2)
    mu3 = attach_downstream(c1[0], mu1, 7, ArchetypeLabel.CHANNEL, h_c=h_c)
    c3 = (ArchetypeLabel.CHANNEL, mu3)
    return NetworkConfig(
        components=[c0, c1, c2, c3],
        connections=[(0, 2, 1, 1), (1, 4, 2, 1), (1, 7, 3, 1)],
        Re=Re, Re_ref=Re_ref,
    )


def random_tree_config(
    rng: np.random.Generator,
    n_components: int,
    Re_range: tuple[float, float] = (50.0, 150.0),
    Re_ref: float = 100.0,
    h_c_range: tuple[float, float] = (0.1, 0.3),
    alpha_range: tuple[float, float] = (math.pi / 8, math.pi / 6),
    gamma: float = 1.0,
    p_junction: float = 0.4,
    root: ArchetypeLabel | None = None,
) -> NetworkConfig:
    """Random tree network grown left to right from an inflow component.

    ``root`` selects the inflow archetype (default inflow channel).  Open
    outlets are extended breadth-first; each new component is a junction
    with probability ``p_junction``, else a channel.  Geometric overlap
    between distant components is not checked.
    """
    if n_components < 1:
        raise ValueError("need at least one component")
    root = root or ArchetypeLabel.INFLOW_CHANNEL
    if root is ArchetypeLabel.INFLOW_JUNCTION:
        mu0 = GeomParams(gamma=gamma, alpha=float(rng.uniform(*alpha_range)))
        root_ports = [4, 7]
    else:
        mu0 = GeomParams(gamma=gamma, h_c=float(rng.uniform(*h_c_range)))
        root_ports = [2]
    comps: list[tuple[ArchetypeLabel, GeomParams]] = [(root, mu0)]
    conns: list[tuple[int, int, int, int]] = []
    frontier: list[tuple[int, int]] = [(0, g) for g in root_ports]
    while len(comps) < n_components:
        pi, pg = frontier.pop(0)
        lab_p, mu_p = comps[pi]
        if rng.uniform() < p_junction:
            child = ArchetypeLabel.JUNCTION
            mu = attach_downstream(lab_p, mu_p, pg, child,
                                   alpha=float(rng.uniform(*alpha_range)))
            new_ports = [4, 7]
        else:
            child = ArchetypeLabel.CHANNEL
            mu = attach_downstream(lab_p, mu_p, pg, child,
                                   h_c=float(rng.uniform(*h_c_range)))
            new_ports = [2]
        ci = len(comps)
        comps.append((child, mu))
        conns.append((pi, pg, ci, 1))
        frontier.extend((ci, g) for g in new_ports)
    return NetworkConfig(
        components=comps, connections=conns,
        Re=float(rng.uniform(*Re_range)), Re_ref=Re_ref,
    )

"""
Mass-spring cloth physics: symplectic (semi-implicit) Euler with
structural, shear and bend springs, vertex-level layer repulsion with
inter-layer friction, ground contact with Coulomb friction and kinematic
grip constraints.

Bending is limp: a fully creased two-hop pair pushes back with at most
`bend_stiffness` x two axis lengths, below the layer friction under a
folded flap, so creases hold.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from src.utils.errors import SimulationUnstable
from src.utils.logger import logger
from src.utils.mesh import AXIS, DIAGONAL, compute_visibility


@dataclass(frozen=True)
class SimParams:
    """Material and integrator constants (SI units)."""
    vertex_mass: float = 3.7e-4
    stretch_stiffness: float = 300.0
    shear_stiffness: float = 100.0
    bend_stiffness: float = 0.05
    spring_damping: float = 0.03
    velocity_damping: float = 1.0
    gravity: float = 9.81
    thickness: float = 0.003
    friction: float = 0.6
    layer_friction: float = 0.6
    # resting layers sit slightly under one thickness apart
    visibility_margin: float = 0.0015
    repulsion_distance: float = 0.028
    repulsion_stiffness: float = 20.0
    repulsion_damping: float = 0.1
    timestep: float = 0.01
    substeps: int = 20
    max_dt: float = 1e-3

    def __post_init__(self):
        positive = ("vertex_mass", "stretch_stiffness", "shear_stiffness", "bend_stiffness",
                    "thickness", "timestep", "max_dt", "repulsion_distance")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"SimParams.{name} must be positive, got {getattr(self, name)}")
        if min(self.friction, self.layer_friction, self.visibility_margin) < 0 or self.substeps < 1:
            raise ValueError("SimParams friction coefficients and visibility_margin must be >= 0, substeps >= 1")

    @property
    def dt(self):
        """Integrator substep length."""
        return self.timestep / self.substeps

    @property
    def rest_height(self):
        return 0.5 * self.thickness


class SpringSet:
    """Flattened spring arrays (pairs, rest lengths, stiffness) for one topology."""

    def __init__(self, mesh, params):
        stretch, stretch_rest = mesh.undirected(AXIS)
        shear, shear_rest = mesh.undirected(DIAGONAL)
        bend, bend_rest = mesh.bend_pairs()
        self.pairs = np.concatenate([stretch, shear, bend])
        self.rest = np.concatenate([stretch_rest, shear_rest, bend_rest])
        self.stiffness = np.concatenate([
            np.full(len(stretch), params.stretch_stiffness),
            np.full(len(shear), params.shear_stiffness),
            np.full(len(bend), params.bend_stiffness),
        ])
        n = mesh.n_vertices
        neighbor = np.concatenate([stretch, shear])
        # 1-ring pairs never repel each other
        self.neighbor_keys = np.sort(neighbor[:, 0] * n + neighbor[:, 1])
        self.n_vertices = n


@dataclass
class SimState:
    """
    Dynamic cloth state. `grips` maps a vertex index to its kinematic target
    for the next step; gripped vertices land exactly on their targets.
    """
    mesh: object
    params: SimParams
    positions: np.ndarray
    velocities: np.ndarray
    grips: dict = field(default_factory=dict)
    time: float = 0.0
    step_count: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.springs = SpringSet(self.mesh, self.params)

    def copy(self):
        clone = SimState(
            mesh=self.mesh,
            params=self.params,
            positions=self.positions.copy(),
            velocities=self.velocities.copy(),
            grips={k: np.array(v) for k, v in self.grips.items()},
            time=self.time,
            step_count=self.step_count,
            history=list(self.history),
        )
        return clone

    def max_speed(self, exclude_grips=True):
        speed = np.linalg.norm(self.velocities, axis=1)
        if exclude_grips and self.grips:
            speed = speed.copy()
            speed[list(self.grips)] = 0.0
        return float(speed.max())

    def to_mesh(self):
        """Current positions as a ClothMesh with fresh visibility flags."""
        flags = compute_visibility(self.mesh, z_margin_m=self.params.visibility_margin, positions=self.positions)
        return self.mesh.with_positions(self.positions.copy(), flags)


@dataclass
class SettleResult:
    state: SimState
    steps: int
    converged: bool


def canonical_state(mesh, params):
    """Flat template resting on the ground, at rest."""
    positions = mesh.template.copy()
    positions[:, 2] = params.rest_height
    return SimState(mesh=mesh, params=params, positions=positions,
                    velocities=np.zeros_like(positions))


def _spring_forces(p, v, springs, damping, out):
    i, j = springs.pairs[:, 0], springs.pairs[:, 1]
    d = p[j] - p[i]
    length = np.linalg.norm(d, axis=1)
    direction = d / np.where(length > 0, length, 1.0)[:, None]
    rel_speed = np.sum((v[j] - v[i]) * direction, axis=1)
    magnitude = springs.stiffness * (length - springs.rest) + damping * rel_speed
    f = direction * magnitude[:, None]
    np.add.at(out, i, f)
    np.add.at(out, j, -f)


def _repulsion_pairs(p, springs, params):
    pairs = cKDTree(p[:, :2]).query_pairs(params.repulsion_distance, output_type="ndarray")
    if pairs.size == 0:
        return pairs.reshape(0, 2)
    keys = pairs[:, 0] * springs.n_vertices + pairs[:, 1]
    pos = np.searchsorted(springs.neighbor_keys, keys)
    pos = np.minimum(pos, len(springs.neighbor_keys) - 1)
    pairs = pairs[springs.neighbor_keys[pos] != keys]
    dz = p[pairs[:, 1], 2] - p[pairs[:, 0], 2]
    return pairs[np.abs(dz) < params.thickness]


@dataclass
class LayerContacts:
    """Stacked non-neighbor pairs closer than one thickness, with their push (N)."""
    pairs: np.ndarray
    sign: np.ndarray
    overlap: np.ndarray
    magnitude: np.ndarray


def layer_contacts(p, v, springs, params):
    pairs = _repulsion_pairs(p, springs, params)
    if pairs.size == 0:
        empty = np.zeros(0)
        return LayerContacts(pairs.reshape(0, 2), empty, empty, empty)
    i, j = pairs[:, 0], pairs[:, 1]
    dz = p[j, 2] - p[i, 2]
    sign = np.where(dz >= 0, 1.0, -1.0)
    overlap = params.thickness - np.abs(dz)
    rel_vz = (v[j, 2] - v[i, 2]) * sign
    magnitude = params.repulsion_stiffness * overlap - params.repulsion_damping * np.minimum(rel_vz, 0.0)
    return LayerContacts(pairs, sign, overlap, magnitude)


def _repulsion_forces(contacts, params, out):
    """Vertical separation of stacked layers to one thickness; returns the repulsion energy."""
    if contacts.pairs.size == 0:
        return 0.0
    i, j = contacts.pairs[:, 0], contacts.pairs[:, 1]
    push = contacts.sign * contacts.magnitude
    np.add.at(out[:, 2], j, push)
    np.add.at(out[:, 2], i, -push)
    return float(0.5 * params.repulsion_stiffness * np.sum(contacts.overlap ** 2))


def _layer_friction(v, contacts, params, dt):
    """
    Coulomb friction between stacked layers at the velocity level: each
    pair removes at most `layer_friction` x its normal impulse of relative
    horizontal velocity, shared among the pairs of the busier vertex so a
    vertex never overshoots to the opposite direction.
    """
    if contacts.pairs.size == 0 or params.layer_friction == 0:
        return
    i, j = contacts.pairs[:, 0], contacts.pairs[:, 1]
    rel = v[j, :2] - v[i, :2]
    speed = np.linalg.norm(rel, axis=1)
    count = np.bincount(contacts.pairs.ravel(), minlength=v.shape[0])
    share = 1.0 / np.maximum(count[i], count[j])
    cap = params.layer_friction * np.maximum(contacts.magnitude, 0.0) * dt / params.vertex_mass
    amount = np.minimum(0.5 * share * speed, cap)
    delta = rel * (amount / np.where(speed > 0, speed, 1.0))[:, None]
    planar = v[:, :2]
    np.add.at(planar, i, delta)
    np.add.at(planar, j, -delta)


def internal_forces(state):
    """Spring plus repulsion forces (no gravity)."""
    forces = np.zeros_like(state.positions)
    _spring_forces(state.positions, state.velocities, state.springs, state.params.spring_damping, forces)
    contacts = layer_contacts(state.positions, state.velocities, state.springs, state.params)
    _repulsion_forces(contacts, state.params, forces)
    return forces


def step(state, dt=None):
    """
    Advance `state` in place by one substep and return it.

    Forces: springs with damping along the edge, gravity, layer repulsion.
    Velocities integrate first, then positions (symplectic Euler). Layer
    and ground friction act on the new velocities before the position
    update, so a resting contact holds still instead of creeping. Ground
    contact projects z >= thickness/2. Grip targets are applied last.
    """
    params = state.params
    dt = params.dt if dt is None else dt
    if dt <= 0 or dt > params.max_dt:
        raise ValueError(f"timestep {dt} outside (0, {params.max_dt}]")

    p = state.positions
    v = state.velocities
    contacts = layer_contacts(p, v, state.springs, params)
    forces = np.zeros_like(p)
    _spring_forces(p, v, state.springs, params.spring_damping, forces)
    _repulsion_forces(contacts, params, forces)
    forces[:, 2] -= params.vertex_mass * params.gravity

    v = v + dt * forces / params.vertex_mass
    v *= max(0.0, 1.0 - params.velocity_damping * dt)
    _layer_friction(v, contacts, params, dt)

    floor = params.rest_height
    contact = p[:, 2] + dt * v[:, 2] < floor
    if np.any(contact):
        normal_impulse = np.maximum(-v[contact, 2], 0.0)
        tangential = v[contact, :2]
        speed = np.linalg.norm(tangential, axis=1)
        keep = np.maximum(0.0, 1.0 - params.friction * normal_impulse / np.where(speed > 0, speed, 1.0))
        v[contact, :2] = tangential * keep[:, None]
    p_new = p + dt * v
    if np.any(contact):
        p_new[contact, 2] = floor
        v[contact, 2] = np.maximum(v[contact, 2], 0.0)

    for index, target in state.grips.items():
        target = np.asarray(target, dtype=np.float64)
        v[index] = (target - p[index]) / dt
        p_new[index] = target

    state.positions = p_new
    state.velocities = v
    state.time += dt
    state.step_count += 1

    if not (np.all(np.isfinite(p_new)) and np.all(np.isfinite(v))):
        bad = int(np.flatnonzero(~np.isfinite(p_new).all(axis=1) | ~np.isfinite(v).all(axis=1))[0])
        raise SimulationUnstable(state.step_count, bad, detail=f"dt={dt}")
    return state


def settle(state, speed_tol=1e-3, max_steps=8000):
    """
    Step until the fastest free vertex is slower than `speed_tol` or
    `max_steps` substeps have run.

    Returns:
        SettleResult: the state, the number of substeps taken and whether the tolerance was met
    """
    if speed_tol <= 0:
        raise ValueError(f"speed tolerance must be positive, got {speed_tol}")
    if not np.isfinite(speed_tol):
        return SettleResult(state, 0, True)
    for n in range(1, max_steps + 1):
        step(state)
        if state.max_speed() < speed_tol:
            logger.debug(f"Settled after {n} substeps")
            return SettleResult(state, n, True)
    logger.debug(f"Settle stopped at max_steps={max_steps} with speed {state.max_speed():.2e}")
    return SettleResult(state, max_steps, False)


def mechanical_energy(state):
    """
    Kinetic + spring + gravitational + repulsion potential energy (J).

    Without damping, friction or contact the symplectic update keeps this
    within a relative band of about dt x (highest mesh angular frequency) / 2
    of its start, with no secular drift; every dissipative term only lowers it.
    """
    params = state.params
    p, v, springs = state.positions, state.velocities, state.springs
    kinetic = 0.5 * params.vertex_mass * float(np.sum(v * v))
    length = np.linalg.norm(p[springs.pairs[:, 1]] - p[springs.pairs[:, 0]], axis=1)
    elastic = 0.5 * float(np.sum(springs.stiffness * (length - springs.rest) ** 2))
    gravity = params.vertex_mass * params.gravity * float(np.sum(p[:, 2]))
    repulsion = _repulsion_forces(layer_contacts(p, v, springs, params), params, np.zeros_like(p))
    return kinetic + elastic + gravity + repulsion


def max_edge_strain(state):
    """Largest current length / rest length over the 8-connected edges."""
    mesh = state.mesh
    return float(np.max(mesh.edge_lengths(state.positions) / mesh.rest_lengths))

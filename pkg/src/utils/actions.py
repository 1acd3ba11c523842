"""
Scripted manipulation primitives executed in the cloth simulator, and the
seeded generators of the dragged / folded / dropped configuration tiers.
"""
import math
from dataclasses import dataclass

import numpy as np

from src.utils.errors import PolicyError
from src.utils.logger import logger
from src.utils.mesh import compute_visibility, keypoint_indices
from src.utils.sim import canonical_state, internal_forces, settle, step

TIERS = ("drag", "fold", "drop")


@dataclass(frozen=True)
class ActionParams:
    """Speeds and settling budgets shared by the single-grip primitives."""
    drag_speed: float = 0.2
    fold_speed: float = 0.3
    lift_speed: float = 0.4
    settle_tol: float = 1e-3
    settle_time: float = 4.0
    hang_tol: float = 0.02
    hang_time: float = 2.0


@dataclass(frozen=True)
class FlipParams:
    """Grasp-hang-and-flip trajectory constants."""
    hang_height: float = 0.5
    lift_speed: float = 0.4
    stretch_ratio: float = 0.95
    stretch_speed: float = 0.1
    tension_cap: float = 1.0
    fling_distance: float = 0.15
    fling_speed: float = 0.6
    ground_clearance: float = 0.01
    release_height: float = 0.03
    release_speed: float = 0.4


def _smoothstep(s):
    s = min(max(s, 0.0), 1.0)
    return s * s * (3.0 - 2.0 * s)


def _run_trajectory(state, paths, duration):
    """
    Drive gripped vertices along `paths` (vertex -> f(s) for s in [0, 1])
    for `duration` seconds of simulated time.
    """
    dt = state.params.dt
    n_steps = max(1, int(math.ceil(duration / dt)))
    for k in range(1, n_steps + 1):
        s = k / n_steps
        state.grips = {index: path(s) for index, path in paths.items()}
        step(state)
    return state


def _hold(state, duration, speed_tol):
    """Keep current grips fixed until the free vertices slow below `speed_tol`."""
    dt = state.params.dt
    for _ in range(max(1, int(math.ceil(duration / dt)))):
        step(state)
        if state.max_speed() < speed_tol:
            break
    return state


def _release_and_settle(state, action_params):
    state.grips = {}
    max_steps = int(math.ceil(action_params.settle_time / state.params.dt))
    result = settle(state, action_params.settle_tol, max_steps)
    if not result.converged:
        logger.debug(f"Cloth still moving after {action_params.settle_time}s settle budget")
    return state


def nearest_visible_vertex(state, point):
    """Index of the visible vertex horizontally nearest `point`."""
    flags = compute_visibility(state.mesh, z_margin_m=state.params.visibility_margin, positions=state.positions)
    candidates = np.flatnonzero(flags)
    if candidates.size == 0:
        raise PolicyError("no visible vertex to grip")
    d = np.linalg.norm(state.positions[candidates, :2] - np.asarray(point, dtype=np.float64)[:2], axis=1)
    return int(candidates[np.argmin(d)])


def action_drag(state, surface_point, displacement_xy, action_params=ActionParams()):
    """Grip the visible vertex nearest `surface_point`, slide it horizontally, release, settle."""
    vertex = nearest_visible_vertex(state, surface_point)
    start = state.positions[vertex].copy()
    offset = np.array([displacement_xy[0], displacement_xy[1], 0.0])
    distance = float(np.linalg.norm(offset))
    state.history.append({"action": "drag", "point": list(map(float, surface_point[:2])),
                          "displacement": [float(offset[0]), float(offset[1])], "vertex": vertex})
    if distance > 0:
        _run_trajectory(state, {vertex: lambda s: start + offset * s}, distance / action_params.drag_speed)
    return _release_and_settle(state, action_params)


def action_fold(state, pick_point, place_point, arc_height, action_params=ActionParams()):
    """Grip near `pick_point`, carry it along a lifted arc to `place_point`, release, settle."""
    vertex = nearest_visible_vertex(state, pick_point)
    start = state.positions[vertex].copy()
    end = np.array([place_point[0], place_point[1], state.params.rest_height + state.params.thickness])
    path_length = float(np.linalg.norm(end[:2] - start[:2])) + 2.0 * arc_height
    state.history.append({"action": "fold", "pick": list(map(float, pick_point[:2])),
                          "place": list(map(float, place_point[:2])), "arc_height": float(arc_height),
                          "vertex": vertex})

    def path(s):
        u = _smoothstep(s)
        point = start + (end - start) * u
        point[2] += arc_height * math.sin(math.pi * u)
        return point

    _run_trajectory(state, {vertex: path}, path_length / action_params.fold_speed)
    return _release_and_settle(state, action_params)


def action_drop(state, grip_point, height, action_params=ActionParams()):
    """Lift the vertex nearest `grip_point` to `height`, let it hang still, release from rest, settle."""
    vertex = nearest_visible_vertex(state, grip_point)
    start = state.positions[vertex].copy()
    top = np.array([start[0], start[1], height])
    state.history.append({"action": "drop", "point": list(map(float, grip_point[:2])),
                          "height": float(height), "vertex": vertex})
    duration = abs(height - start[2]) / action_params.lift_speed
    _run_trajectory(state, {vertex: lambda s: start + (top - start) * _smoothstep(s)}, duration)
    _hold(state, action_params.hang_time, action_params.hang_tol)
    state.velocities[vertex] = 0.0
    return _release_and_settle(state, action_params)


def grip_tension(state):
    """Largest internal force magnitude acting on a gripped vertex (N)."""
    if not state.grips:
        return 0.0
    forces = internal_forces(state)
    return float(np.max(np.linalg.norm(forces[list(state.grips)], axis=1)))


def action_flip(state, left_vertex, right_vertex, flip_params=FlipParams(), action_params=ActionParams()):
    """
    Dual-arm grasp-hang-and-flip.

    Both vertices are lifted to the hang height above the workspace center,
    pulled apart along their axis until stretched to `stretch_ratio` of their
    canonical distance (or the grip tension cap), swung forward and down until
    the hanging edge nearly touches the table, then swept back and down at
    `release_speed` and released mid-swing at `release_height`, so the
    grasped edge lands with the release velocity.
    """
    if left_vertex == right_vertex:
        raise PolicyError("flip needs two distinct grip vertices")
    params = state.params
    state.history.append({"action": "flip", "left": int(left_vertex), "right": int(right_vertex)})

    p = state.positions
    axis = p[right_vertex, :2] - p[left_vertex, :2]
    if np.linalg.norm(axis) < 1e-9:
        axis = state.mesh.template[right_vertex, :2] - state.mesh.template[left_vertex, :2]
    axis = axis / np.linalg.norm(axis)
    forward = np.array([-axis[1], axis[0]])
    canonical = float(np.linalg.norm(state.mesh.template[right_vertex] - state.mesh.template[left_vertex]))
    target_gap = flip_params.stretch_ratio * canonical
    gap = min(float(np.linalg.norm(p[right_vertex, :2] - p[left_vertex, :2])), target_gap)

    def hang_point(center, half_gap, sign, z):
        return np.array([center[0] + sign * axis[0] * half_gap, center[1] + sign * axis[1] * half_gap, z])

    # lift both grips above the workspace center
    center = np.zeros(2)
    starts = {left_vertex: p[left_vertex].copy(), right_vertex: p[right_vertex].copy()}
    goals = {left_vertex: hang_point(center, gap / 2, -1.0, flip_params.hang_height),
             right_vertex: hang_point(center, gap / 2, 1.0, flip_params.hang_height)}
    travel = max(np.linalg.norm(goals[v] - starts[v]) for v in goals)
    paths = {v: (lambda s, a=starts[v], b=goals[v]: a + (b - a) * _smoothstep(s)) for v in goals}
    _run_trajectory(state, paths, travel / flip_params.lift_speed)
    _hold(state, action_params.hang_time, action_params.hang_tol)

    # stretch apart, one control tick at a time
    tick_gain = flip_params.stretch_speed * params.timestep
    while gap < target_gap and grip_tension(state) < flip_params.tension_cap:
        new_gap = min(gap + tick_gain, target_gap)
        starts = {v: state.positions[v].copy() for v in goals}
        goals = {left_vertex: hang_point(center, new_gap / 2, -1.0, flip_params.hang_height),
                 right_vertex: hang_point(center, new_gap / 2, 1.0, flip_params.hang_height)}
        paths = {v: (lambda s, a=starts[v], b=goals[v]: a + (b - a) * s) for v in goals}
        _run_trajectory(state, paths, params.timestep)
        gap = new_gap

    # swing forward and down until the hanging edge nearly touches the table
    hang_length = flip_params.hang_height - float(state.positions[:, 2].min())
    low = params.rest_height + hang_length + flip_params.ground_clearance
    low = min(low, flip_params.hang_height)
    starts = {v: state.positions[v].copy() for v in goals}
    shift = np.array([forward[0], forward[1], 0.0]) * flip_params.fling_distance
    goals = {v: np.array([starts[v][0] + shift[0], starts[v][1] + shift[1], low]) for v in goals}
    paths = {v: (lambda s, a=starts[v], b=goals[v]: a + (b - a) * s) for v in goals}
    _run_trajectory(state, paths, max(flip_params.fling_distance, 1e-3) / flip_params.fling_speed)

    # sweep back past the workspace center and down, letting go at the
    # release height while still moving
    release_z = params.rest_height + flip_params.release_height
    drop = max(low - release_z, 0.0)
    back = drop + flip_params.fling_distance
    starts = {v: state.positions[v].copy() for v in goals}
    goals = {v: np.array([starts[v][0] - forward[0] * back, starts[v][1] - forward[1] * back,
                          starts[v][2] - drop]) for v in goals}
    paths = {v: (lambda s, a=starts[v], b=goals[v]: a + (b - a) * s) for v in goals}
    _run_trajectory(state, paths, max(math.hypot(back, drop), 1e-3) / flip_params.release_speed)

    return _release_and_settle(state, action_params)


def _boundary_vertices(mesh):
    r = np.arange(mesh.n_vertices) // mesh.n_cols
    c = np.arange(mesh.n_vertices) % mesh.n_cols
    return np.flatnonzero((r == 0) | (c == 0) | (r == mesh.n_rows - 1) | (c == mesh.n_cols - 1))


def gen_tier(tier, seed, mesh, params, action_params=ActionParams()):
    """
    Generate one configuration of the given tier from the canonical flat cloth.

    drag: one drag from a boundary-biased point, random direction, length U[0.05, 0.2] m.
    fold: two folds picked near corner / mid-edge keypoints and placed across the cloth.
    drop: lift one random vertex to U[0.15, 0.3] m and release.

    Returns:
        tuple: (ClothMesh with visibility flags, SimState); fully determined by `seed`
    """
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")
    rng = np.random.default_rng(seed)
    state = canonical_state(mesh, params)

    if tier == "drag":
        boundary = _boundary_vertices(mesh)
        vertex = int(rng.choice(boundary)) if rng.random() < 0.8 else int(rng.integers(mesh.n_vertices))
        angle = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(0.05, 0.2)
        action_drag(state, state.positions[vertex], (length * math.cos(angle), length * math.sin(angle)),
                    action_params)
    elif tier == "fold":
        keypoints = keypoint_indices(mesh)[:8]
        for _ in range(2):
            anchor = int(rng.choice(keypoints))
            row = min(max(anchor // mesh.n_cols + int(rng.integers(-1, 2)), 0), mesh.n_rows - 1)
            col = min(max(anchor % mesh.n_cols + int(rng.integers(-1, 2)), 0), mesh.n_cols - 1)
            pick = state.positions[row * mesh.n_cols + col, :2].copy()
            centroid = state.positions[:, :2].mean(axis=0)
            place = centroid + (centroid - pick) * rng.uniform(0.2, 0.9) + rng.normal(0.0, 0.02, size=2)
            action_fold(state, pick, place, rng.uniform(0.05, 0.1), action_params)
    else:
        vertex = int(rng.integers(mesh.n_vertices))
        action_drop(state, state.positions[vertex], rng.uniform(0.15, 0.3), action_params)

    logger.debug(f"Generated {tier} sample seed={seed} after {state.step_count} substeps")
    return state.to_mesh(), state


def replay_actions(history, mesh, params, action_params=ActionParams(), flip_params=FlipParams()):
    """Re-execute a recorded action history from the canonical state."""
    state = canonical_state(mesh, params)
    for entry in history:
        kind = entry["action"]
        if kind == "drag":
            action_drag(state, entry["point"], entry["displacement"], action_params)
        elif kind == "fold":
            action_fold(state, entry["pick"], entry["place"], entry["arc_height"], action_params)
        elif kind == "drop":
            action_drop(state, entry["point"], entry["height"], action_params)
        elif kind == "flip":
            action_flip(state, entry["left"], entry["right"], flip_params, action_params)
        else:
            raise ValueError(f"unknown action {kind!r} in history")
    return state



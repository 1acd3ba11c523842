"""
Target-oriented manipulation: target silhouettes, the offline query list
of flipped outcomes over mesh-group pairs, dual-arm flip and single-arm
drag policies, episode harnesses and the coverage / similarity metrics.
"""
import concurrent.futures
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from src.utils.actions import ActionParams, FlipParams, action_drag, action_flip
from src.utils.errors import FormatError, PolicyError, SimulationUnstable
from src.utils.gnn import reconstruct_with_tta, to_world
from src.utils.logger import logger
from src.utils.mesh import cluster
from src.utils.observation import observe
from src.utils.sim import canonical_state

TARGETS = ("flat", "triangle", "rectangle")
EPISODE_BUDGET = {"flat": 2, "triangle": 1, "rectangle": 1}
QUERY_MAGIC = b"TRTMQRYL"
QUERY_VERSION = 1
TERMINATION_DISTANCE = 0.01


@dataclass(frozen=True)
class PolicyConfig:
    block_size: int = 3
    episodes_single: int = 4
    target: str = "flat"


@dataclass(frozen=True, eq=False)
class TargetSpec:
    name: str
    silhouette: np.ndarray
    episodes: int


@dataclass(frozen=True, eq=False)
class QueryList:
    """Group pairs ranked by how closely their canonical flip matches the target."""
    target: str
    pairs: np.ndarray
    silhouettes: np.ndarray
    scores: np.ndarray
    block_size: int
    seed: int = 0

    def __len__(self):
        return self.pairs.shape[0]


def center_silhouette(silhouette):
    """Shift a binary silhouette by whole pixels so its centroid sits at the image center."""
    s = (np.asarray(silhouette) > 0.5).astype(np.float64)
    if not s.any():
        return s
    rows, cols = np.nonzero(s)
    mid = (s.shape[0] - 1) / 2.0
    shift = (int(np.round(mid - rows.mean())), int(np.round(mid - cols.mean())))
    return ndimage.shift(s, shift, order=0, cval=0.0)


def similarity(s_a, s_b):
    """
    1 - L_sil(S_a, S_b) after centering both silhouettes. An empty
    reference scores 1 against an empty silhouette and -inf otherwise.
    """
    a = center_silhouette(s_a)
    b = center_silhouette(s_b)
    norm = float(np.sum(b * b))
    if norm == 0:
        return 1.0 if not a.any() else -math.inf
    return 1.0 - float(np.sum((a - b) ** 2)) / norm


def coverage(silhouette, canonical_area):
    """Silhouette area as a fraction of the canonical flat silhouette area."""
    if canonical_area <= 0:
        raise ValueError(f"canonical area must be positive, got {canonical_area}")
    return float(np.sum(np.asarray(silhouette) > 0.5)) / canonical_area


def state_silhouette(state, obs_config):
    obs, _ = observe(state.to_mesh(), obs_config, state.mesh.canonical_extent)
    return obs.silhouette


def canonical_silhouette(mesh, params, obs_config):
    return state_silhouette(canonical_state(mesh, params), obs_config)


def make_target(name, mesh, params, obs_config):
    """
    Target silhouettes derived from the canonical flat silhouette: the whole
    square (flat), the half on the -x-y side of its diagonal (triangle) or
    its -y half (rectangle), re-centered.
    """
    if name not in TARGETS:
        raise PolicyError(f"unknown target {name!r}; expected one of {TARGETS}")
    flat = canonical_silhouette(mesh, params, obs_config)
    n = flat.shape[0]
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mid = (n - 1) / 2.0
    if name == "flat":
        mask = np.ones_like(flat, dtype=bool)
    elif name == "triangle":
        mask = (rows - mid) + (cols - mid) <= 0
    else:
        mask = rows <= mid
    return TargetSpec(name=name, silhouette=center_silhouette(flat * mask), episodes=EPISODE_BUDGET[name])


def canonical_targets(mesh, params, block_size):
    """Group centroids of the flat template resting at the workspace center."""
    return cluster(canonical_state(mesh, params).to_mesh(), block_size).centroids


def all_pairs(n_groups):
    return [(i, j) for i in range(n_groups) for j in range(i + 1, n_groups)]


def rollout_pair(mesh, params, obs_config, left, right, flip_params=FlipParams(), action_params=ActionParams()):
    """Silhouette after one flip of the canonical cloth gripped at two vertices; None when unstable."""
    state = canonical_state(mesh, params)
    try:
        action_flip(state, left, right, flip_params, action_params)
    except SimulationUnstable as exc:
        logger.warning(f"Flip rollout on vertices ({left}, {right}) went unstable: {exc}")
        return None
    return state_silhouette(state, obs_config)


def _score_pair(mesh, params, obs_config, flip_params, action_params, left, right, target_silhouette):
    silhouette = rollout_pair(mesh, params, obs_config, left, right, flip_params, action_params)
    if silhouette is None:
        return np.zeros_like(target_silhouette, dtype=np.uint8), -math.inf
    return (silhouette > 0.5).astype(np.uint8), similarity(silhouette, target_silhouette)


def build_query_list(target, mesh, params, obs_config, block_size, workers=1, seed=0,
                     flip_params=FlipParams(), action_params=ActionParams()):
    """
    Flip the canonical cloth once for every unordered group pair, score the
    settled silhouette against the target and rank by descending score
    (pair index breaks ties). Unstable rollouts stay in the list at -inf.
    """
    groups = cluster(canonical_state(mesh, params).to_mesh(), block_size)
    pairs = all_pairs(groups.n_groups)
    logger.info(f"Building {target.name} query list over {len(pairs)} group pairs with {workers} worker(s)")
    results = [None] * len(pairs)
    args = [(mesh, params, obs_config, flip_params, action_params,
             int(groups.grasp[i]), int(groups.grasp[j]), target.silhouette) for i, j in pairs]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
            future_to_pair = {executor.submit(_score_pair, *a): k for k, a in enumerate(args)}
            for future in concurrent.futures.as_completed(future_to_pair):
                results[future_to_pair[future]] = future.result()
    else:
        for k, a in enumerate(args):
            results[k] = _score_pair(*a)
            logger.debug(f"Pair {pairs[k]} scored {results[k][1]:.4f}")

    scores = np.array([r[1] for r in results], dtype=np.float64)
    order = sorted(range(len(pairs)), key=lambda k: (-scores[k], k))
    return QueryList(
        target=target.name,
        pairs=np.asarray([pairs[k] for k in order], dtype=np.int64).reshape(-1, 2),
        silhouettes=(np.stack([results[k][0] for k in order]) if order
                     else np.zeros((0,) + target.silhouette.shape, dtype=np.uint8)),
        scores=scores[order],
        block_size=block_size,
        seed=seed,
    )


def select_ranked(group, query_list):
    """First ranked pair whose two groups are both visible, as ((left, right) grasp vertices, score), or None."""
    if len(query_list) == 0:
        raise PolicyError("query list is empty")
    for (g_left, g_right), score in zip(query_list.pairs, query_list.scores):
        if score == -math.inf:
            continue
        if group.flags[g_left] and group.flags[g_right]:
            return (int(group.grasp[g_left]), int(group.grasp[g_right])), float(score)
    return None


def select_pair(group, query_list):
    """Grasp vertices of the first ranked pair whose two groups are both visible, or None."""
    ranked = select_ranked(group, query_list)
    return None if ranked is None else ranked[0]


def rescore_query_list(query_list, target):
    """
    Re-rank the stored flip outcomes of `query_list` against another target
    without simulating again; unstable (-inf) rollouts stay at -inf.
    """
    scores = np.array([s if s == -math.inf else similarity(sil, target.silhouette)
                       for sil, s in zip(query_list.silhouettes, query_list.scores)], dtype=np.float64)
    order = sorted(range(len(query_list)), key=lambda k: (-scores[k], k))
    return QueryList(
        target=target.name,
        pairs=query_list.pairs[order].reshape(-1, 2),
        silhouettes=query_list.silhouettes[order],
        scores=scores[order],
        block_size=query_list.block_size,
        seed=query_list.seed,
    )


@dataclass(frozen=True)
class DragAction:
    group: int
    vertex: int
    displacement: np.ndarray

    @property
    def distance(self):
        return float(np.linalg.norm(self.displacement))


def single_arm_step(group, targets):
    """
    Drag the visible group farthest from its canonical target straight
    onto that target; row-major order breaks ties.

    Distances and the returned displacement are measured in the horizontal
    (xy) plane only: group heights are ignored and the drag is horizontal.
    """
    visible = np.flatnonzero(group.flags)
    if visible.size == 0:
        raise PolicyError("no visible mesh group to drag")
    offsets = targets[:, :2] - group.centroids[:, :2]
    distance = np.linalg.norm(offsets, axis=1)
    chosen = int(visible[np.argmax(distance[visible])])
    return DragAction(group=chosen, vertex=int(group.grasp[chosen]), displacement=offsets[chosen])


def save_query_list(path, query_list):
    """
    Layout (little-endian): magic, version u32, name length u16, name,
    block size u16, seed u64, H u16, W u16, count u32, then per pair
    (g_L u32, g_R u32, score f64, silhouette offset u64) and the u8
    silhouette blob.
    """
    name = query_list.target.encode("utf-8")
    count = len(query_list)
    h, w = query_list.silhouettes.shape[1:]
    with open(path, "wb") as fh:
        fh.write(QUERY_MAGIC)
        fh.write(struct.pack("<IH", QUERY_VERSION, len(name)))
        fh.write(name)
        fh.write(struct.pack("<HQHHI", query_list.block_size, query_list.seed, h, w, count))
        for k in range(count):
            g_left, g_right = query_list.pairs[k]
            fh.write(struct.pack("<IIdQ", int(g_left), int(g_right), float(query_list.scores[k]), k * h * w))
        fh.write(np.ascontiguousarray(query_list.silhouettes, dtype=np.uint8).tobytes())
    return path


def load_query_list(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != QUERY_MAGIC:
        raise FormatError(f"{path}: not a query list (bad magic)")
    try:
        version, name_len = struct.unpack_from("<IH", blob, 8)
        if version != QUERY_VERSION:
            raise FormatError(f"{path}: unsupported query list version {version}")
        offset = 14
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        block_size, seed, h, w, count = struct.unpack_from("<HQHHI", blob, offset)
        offset += struct.calcsize("<HQHHI")
        entries = [struct.unpack_from("<IIdQ", blob, offset + 24 * k) for k in range(count)]
        offset += 24 * count
        data = np.frombuffer(blob, dtype=np.uint8, offset=offset)
        if data.size != count * h * w:
            raise FormatError(f"{path}: silhouette blob holds {data.size} bytes, expected {count * h * w}")
        silhouettes = np.stack([data[e[3]:e[3] + h * w].reshape(h, w) for e in entries]) if count else \
            np.zeros((0, h, w), dtype=np.uint8)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated query list ({exc})") from exc
    return QueryList(
        target=name,
        pairs=np.asarray([(e[0], e[1]) for e in entries], dtype=np.int64).reshape(-1, 2),
        silhouettes=silhouettes.copy(),
        scores=np.asarray([e[2] for e in entries], dtype=np.float64),
        block_size=block_size,
        seed=seed,
    )


@dataclass
class EpisodeTrace:
    """Metric after the initial state and after every episode, plus what was done."""
    seed: int
    tier: str
    policy: str
    target: str
    mesh_source: str
    metrics: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    failed: bool = False

    def to_record(self):
        return {
            "seed": self.seed, "tier": self.tier, "policy": self.policy, "target": self.target,
            "mesh_source": self.mesh_source, "metrics": self.metrics, "actions": self.actions,
            "failed": self.failed,
        }


class MeshSource:
    """
    Produces the world-frame mesh the policy acts on: the simulator's own
    mesh ("gt") or a reconstruction of the rendered observation ("recon").
    """

    def __init__(self, kind, obs_config, model=None, scorer=None, tta=True):
        if kind not in ("gt", "recon"):
            raise PolicyError(f"unknown mesh source {kind!r}")
        if kind == "recon" and model is None:
            raise PolicyError("mesh source 'recon' needs a trained model")
        self.kind = kind
        self.obs_config = obs_config
        self.model = model
        self.scorer = scorer
        self.tta = tta

    def __call__(self, state):
        truth = state.to_mesh()
        if self.kind == "gt":
            return truth
        obs, _ = observe(truth, self.obs_config, state.mesh.canonical_extent)
        if self.tta:
            mesh, _, _ = reconstruct_with_tta(self.model, obs, self.scorer)
        else:
            mesh = self.model.reconstruct(obs)
        return to_world(mesh, obs)


def _metric(state, target, obs_config, canonical_area):
    silhouette = state_silhouette(state, obs_config)
    if target is None or target.name == "flat":
        return coverage(silhouette, canonical_area)
    return similarity(silhouette, target.silhouette)


def run_dual_arm_episode(state, target, query_list, mesh_source, obs_config, block_size, episodes=None,
                         flip_params=FlipParams(), action_params=ActionParams(), trace=None):
    """
    Per episode: mesh -> cluster -> select the ranked pair -> flip -> record
    the target metric (coverage for flat, similarity otherwise). No
    qualifying pair makes the episode a recorded no-op. When the observed
    silhouette already matches the target at least as well as the pair's
    canonical flip outcome, the cloth counts as solved and the episode is
    recorded as done without flipping.
    """
    episodes = target.episodes if episodes is None else episodes
    canonical_area = float(np.sum(canonical_silhouette(state.mesh, state.params, obs_config)))
    trace = trace or EpisodeTrace(seed=0, tier="", policy="dual", target=target.name, mesh_source=mesh_source.kind)
    trace.metrics.append(_metric(state, target, obs_config, canonical_area))
    for episode in range(episodes):
        group = cluster(mesh_source(state), block_size)
        ranked = select_ranked(group, query_list)
        if ranked is None:
            logger.info(f"Episode {episode + 1}: no visible group pair, recording a no-op")
            trace.actions.append({"action": "noop"})
        else:
            pair, expected = ranked
            current = similarity(state_silhouette(state, obs_config), target.silhouette)
            if current >= expected:
                logger.info(f"Episode {episode + 1}: similarity {current:.4f} already reaches the best "
                            f"flip outcome {expected:.4f}")
                trace.actions.append({"action": "done", "similarity": current, "expected": expected})
                trace.metrics.append(trace.metrics[-1])
                continue
            try:
                action_flip(state, pair[0], pair[1], flip_params, action_params)
            except SimulationUnstable as exc:
                logger.warning(f"Episode {episode + 1} flip went unstable: {exc}")
                trace.failed = True
                break
            trace.actions.append({"action": "flip", "left": pair[0], "right": pair[1]})
        trace.metrics.append(_metric(state, target, obs_config, canonical_area))
        logger.debug(f"Episode {episode + 1}/{episodes}: metric {trace.metrics[-1]:.4f}")
    _pad(trace, episodes)
    return trace


def run_single_arm_episode(state, mesh_source, obs_config, block_size, episodes=4,
                           action_params=ActionParams(), trace=None):
    """
    Per episode: mesh -> cluster -> single_arm_step -> drag -> record
    coverage. Once the chosen displacement is under 1 cm the cloth counts
    as flat and later episodes are no-ops.
    """
    targets = canonical_targets(state.mesh, state.params, block_size)
    canonical_area = float(np.sum(canonical_silhouette(state.mesh, state.params, obs_config)))
    trace = trace or EpisodeTrace(seed=0, tier="", policy="single", target="flat", mesh_source=mesh_source.kind)
    trace.metrics.append(_metric(state, None, obs_config, canonical_area))
    for episode in range(episodes):
        group = cluster(mesh_source(state), block_size)
        try:
            drag = single_arm_step(group, targets)
        except PolicyError as exc:
            logger.info(f"Episode {episode + 1}: {exc}; recording a no-op")
            trace.actions.append({"action": "noop"})
            trace.metrics.append(trace.metrics[-1])
            continue
        if drag.distance < TERMINATION_DISTANCE:
            trace.actions.append({"action": "done", "distance": drag.distance})
        else:
            try:
                action_drag(state, state.positions[drag.vertex], drag.displacement, action_params)
            except SimulationUnstable as exc:
                logger.warning(f"Episode {episode + 1} drag went unstable: {exc}")
                trace.failed = True
                break
            trace.actions.append({"action": "drag", "group": drag.group, "vertex": drag.vertex,
                                  "displacement": [float(d) for d in drag.displacement]})
        trace.metrics.append(_metric(state, None, obs_config, canonical_area))
    _pad(trace, episodes)
    return trace


def _pad(trace, episodes):
    while len(trace.metrics) < episodes + 1:
        trace.metrics.append(trace.metrics[-1])


def summarize(traces):
    """
    Mean and standard deviation of the metric after each episode, per tier
    and over all traces.

    Returns:
        dict: tier (and "all") -> {"count", "mean": [...], "std": [...]}
    """
    groups = {}
    for t in traces:
        groups.setdefault(t.tier, []).append(t.metrics)
        groups.setdefault("all", []).append(t.metrics)
    summary = {}
    for tier, rows in groups.items():
        values = np.asarray(rows, dtype=np.float64)
        summary[tier] = {
            "count": len(rows),
            "mean": values.mean(axis=0).tolist(),
            "std": values.std(axis=0).tolist(),
        }
    return summary


def format_summary(summary, metric_name):
    lines = []
    for tier, row in summary.items():
        steps = "  ".join(f"{m:.3f}+-{s:.3f}" for m, s in zip(row["mean"], row["std"]))
        lines.append(f"{tier:<8} n={row['count']:<4} {metric_name} by episode: {steps}")
    return "\n".join(lines)

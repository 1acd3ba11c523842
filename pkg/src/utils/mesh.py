"""
Template and reconstructed cloth meshes: grid topology, keypoints,
top-layer visibility and clustering into grasp-sized groups.
"""
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from src.utils.errors import MeshError

DEFAULT_THICKNESS = 0.003

# Row/column offsets of the 8-connected neighborhood, in edge order.
NEIGHBOR_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)

AXIS, DIAGONAL = 0, 1


@dataclass(frozen=True, eq=False)
class ClothMesh:
    """
    Mass-spring grid mesh.

    `positions` are per-vertex 3-D points in meters, `flags` is True for
    visible vertices, `edges` are directed (i, j) pairs sorted by source
    vertex with their canonical `rest_lengths`. `template` holds the
    canonical flat pose the topology was built from.
    """
    n_rows: int
    n_cols: int
    positions: np.ndarray
    flags: np.ndarray
    edges: np.ndarray
    rest_lengths: np.ndarray
    edge_kinds: np.ndarray
    template: np.ndarray

    @property
    def n_vertices(self):
        return self.n_rows * self.n_cols

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def axis_rest_length(self):
        return float(self.rest_lengths[self.edge_kinds == AXIS].min())

    @property
    def canonical_extent(self):
        """Longest side of the canonical flat cloth, in meters."""
        span = self.template.max(axis=0) - self.template.min(axis=0)
        return float(max(span[0], span[1]))

    def with_positions(self, positions, flags=None):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != (self.n_vertices, 3):
            raise MeshError(f"expected positions of shape {(self.n_vertices, 3)}, got {positions.shape}")
        if flags is None:
            flags = np.ones(self.n_vertices, dtype=bool)
        return replace(self, positions=positions, flags=np.asarray(flags, dtype=bool))

    def index(self, row, col):
        return row * self.n_cols + col

    @cached_property
    def faces(self):
        """Triangles (F, 3), each grid quad split along its down-right diagonal."""
        r, c = np.meshgrid(np.arange(self.n_rows - 1), np.arange(self.n_cols - 1), indexing="ij")
        a = (r * self.n_cols + c).reshape(-1)
        b = a + 1
        d = a + self.n_cols
        e = d + 1
        return np.concatenate([np.stack([a, b, e], axis=1), np.stack([a, e, d], axis=1)], axis=0)

    def undirected(self, kind=None):
        """Spring list: (pairs (M, 2) with i < j, rest lengths (M,))."""
        keep = self.edges[:, 0] < self.edges[:, 1]
        if kind is not None:
            keep &= self.edge_kinds == kind
        return self.edges[keep], self.rest_lengths[keep]

    def bend_pairs(self):
        """Two-hop axis pairs (i, i+2 along a row or column) with canonical rest lengths."""
        pairs = []
        for r in range(self.n_rows):
            for c in range(self.n_cols):
                if c + 2 < self.n_cols:
                    pairs.append((self.index(r, c), self.index(r, c + 2)))
                if r + 2 < self.n_rows:
                    pairs.append((self.index(r, c), self.index(r + 2, c)))
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rest = np.linalg.norm(self.template[pairs[:, 1]] - self.template[pairs[:, 0]], axis=1)
        return pairs, rest

    def edge_lengths(self, positions=None):
        p = self.positions if positions is None else positions
        return np.linalg.norm(p[self.edges[:, 1]] - p[self.edges[:, 0]], axis=1)


@dataclass(frozen=True, eq=False)
class MeshGroup:
    """Coarse block clustering of a ClothMesh used for grasp selection."""
    group_rows: int
    group_cols: int
    block_size: int
    centroids: np.ndarray
    flags: np.ndarray
    members: np.ndarray
    grasp: np.ndarray

    @property
    def n_groups(self):
        return self.group_rows * self.group_cols


def make_template(n_rows, n_cols, side_length_m, height_m=None):
    """
    Build the canonical flat grid mesh centered at the origin.

    Args:
        n_rows (int): Vertex rows (>= 3)
        n_cols (int): Vertex columns (>= 3)
        side_length_m (float): Cloth width along x in meters
        height_m (float): Cloth height along y; defaults to a square cloth

    Returns:
        ClothMesh: flat z=0 mesh with 8-connected edges, all vertices visible
    """
    if n_rows < 3 or n_cols < 3:
        raise MeshError(f"grid must be at least 3x3 for keypoints to exist, got {n_rows}x{n_cols}")
    height_m = side_length_m if height_m is None else height_m
    if side_length_m <= 0 or height_m <= 0:
        raise MeshError(f"cloth size must be positive, got {side_length_m} x {height_m}")

    dx = side_length_m / (n_cols - 1)
    dy = height_m / (n_rows - 1)
    rows, cols = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    template = np.zeros((n_rows * n_cols, 3))
    template[:, 0] = ((cols - (n_cols - 1) / 2.0) * dx).reshape(-1)
    template[:, 1] = ((rows - (n_rows - 1) / 2.0) * dy).reshape(-1)

    edges, kinds = [], []
    for r in range(n_rows):
        for c in range(n_cols):
            for dr, dc in NEIGHBOR_OFFSETS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < n_rows and 0 <= cc < n_cols:
                    edges.append((r * n_cols + c, rr * n_cols + cc))
                    kinds.append(DIAGONAL if dr and dc else AXIS)
    edges = np.asarray(edges, dtype=np.int64)
    rest = np.linalg.norm(template[edges[:, 1]] - template[edges[:, 0]], axis=1)

    return ClothMesh(
        n_rows=n_rows,
        n_cols=n_cols,
        positions=template.copy(),
        flags=np.ones(n_rows * n_cols, dtype=bool),
        edges=edges,
        rest_lengths=rest,
        edge_kinds=np.asarray(kinds, dtype=np.uint8),
        template=template,
    )


def keypoint_indices(mesh):
    """
    Nine keypoints in fixed order: corners (top-left, top-right,
    bottom-left, bottom-right), mid-edges (top, left, right, bottom), center.
    """
    n_rows, n_cols = mesh.n_rows, mesh.n_cols
    if n_rows % 2 == 0 or n_cols % 2 == 0:
        raise MeshError(f"keypoints need odd grid dimensions, got {n_rows}x{n_cols}")
    last_r, last_c = n_rows - 1, n_cols - 1
    mid_r, mid_c = last_r // 2, last_c // 2
    cells = [
        (0, 0), (0, last_c), (last_r, 0), (last_r, last_c),
        (0, mid_c), (mid_r, 0), (mid_r, last_c), (last_r, mid_c),
        (mid_r, mid_c),
    ]
    return np.asarray([r * n_cols + c for r, c in cells], dtype=np.int64)


def default_cylinder_radius(mesh):
    return 0.5 * mesh.axis_rest_length


def compute_visibility(mesh, cyl_radius_m=None, z_margin_m=None, positions=None):
    """
    Top-layer test: a vertex is hidden when another vertex within a
    vertical cylinder of `cyl_radius_m` lies more than `z_margin_m` above it.

    Args:
        mesh (ClothMesh): Mesh whose positions are tested (or topology only when `positions` given)
        cyl_radius_m (float): Horizontal cylinder radius; defaults to half the axis rest length
        z_margin_m (float): Height margin; defaults to the cloth thickness
        positions (ndarray): Optional (N, 3) override for the mesh positions

    Returns:
        ndarray: bool flags, True where visible
    """
    p = mesh.positions if positions is None else np.asarray(positions)
    cyl_radius_m = default_cylinder_radius(mesh) if cyl_radius_m is None else cyl_radius_m
    z_margin_m = DEFAULT_THICKNESS if z_margin_m is None else z_margin_m
    if cyl_radius_m <= 0 or z_margin_m < 0:
        raise MeshError(f"invalid visibility cylinder: radius {cyl_radius_m}, margin {z_margin_m}")

    visible = np.ones(p.shape[0], dtype=bool)
    pairs = cKDTree(p[:, :2]).query_pairs(cyl_radius_m, output_type="ndarray")
    if pairs.size:
        i, j = pairs[:, 0], pairs[:, 1]
        dz = p[j, 2] - p[i, 2]
        visible[i[dz > z_margin_m]] = False
        visible[j[-dz > z_margin_m]] = False
    return visible


def valid_block_sizes(mesh):
    return [b for b in range(1, min(mesh.n_rows, mesh.n_cols) + 1)
            if mesh.n_rows % b == 0 and mesh.n_cols % b == 0]


def cluster(mesh, block_size):
    """
    Tile the vertex grid into block_size x block_size groups.

    A group is visible when at least half of its members are; its grasp
    vertex is the visible member nearest the centroid (lowest index on
    ties), or the nearest member overall when the group is hidden.
    """
    if block_size < 1 or mesh.n_rows % block_size or mesh.n_cols % block_size:
        raise MeshError(
            f"block size {block_size} does not tile a {mesh.n_rows}x{mesh.n_cols} grid; "
            f"valid sizes: {valid_block_sizes(mesh)}"
        )
    g_rows, g_cols = mesh.n_rows // block_size, mesh.n_cols // block_size
    members = []
    for gr in range(g_rows):
        for gc in range(g_cols):
            rows = np.arange(gr * block_size, (gr + 1) * block_size)
            cols = np.arange(gc * block_size, (gc + 1) * block_size)
            members.append((rows[:, None] * mesh.n_cols + cols[None, :]).reshape(-1))
    members = np.asarray(members, dtype=np.int64)

    member_pos = mesh.positions[members]
    centroids = member_pos.mean(axis=1)
    member_flags = mesh.flags[members]
    flags = 2 * member_flags.sum(axis=1) >= members.shape[1]

    dist = np.linalg.norm(member_pos - centroids[:, None, :], axis=2)
    visible_dist = np.where(member_flags, dist, np.inf)
    pick = np.where(flags, np.argmin(visible_dist, axis=1), np.argmin(dist, axis=1))
    grasp = members[np.arange(members.shape[0]), pick]

    return MeshGroup(
        group_rows=g_rows,
        group_cols=g_cols,
        block_size=block_size,
        centroids=centroids,
        flags=flags,
        members=members,
        grasp=grasp,
    )


def flag_error(predicted, truth, subset=None):
    """Fraction of `subset` (default: all vertices) whose visibility flags disagree."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise MeshError(f"flag arrays differ in length: {predicted.shape} vs {truth.shape}")
    subset = np.arange(truth.shape[0]) if subset is None else np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise MeshError("flag_error needs a non-empty vertex subset")
    return float(np.mean(predicted[subset] != truth[subset]))


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_mesh(mesh, angle):
    """Rigidly rotate positions about the vertical axis through the origin."""
    return mesh.with_positions(mesh.positions @ rotation_z(angle).T, mesh.flags)


def translate_mesh(mesh, offset):
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape == (2,):
        offset = np.append(offset, 0.0)
    return mesh.with_positions(mesh.positions + offset, mesh.flags)

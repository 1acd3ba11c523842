"""
Reconstruction losses: full-mesh and keypoint L1, soft silhouette,
unidirectional chamfer from the observed points and edge-length
regularization. All terms are tape ops on positions in the normalized
cloth frame.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from src.utils.autodiff import (
    Tensor, add, gather_rows, l1_distance, reshape, row_norm, scale, sq_l2_distance, sub,
)
from src.utils.errors import ShapeError
from src.utils.observation import depth_to_pointcloud, soft_silhouette, subsample_points


@dataclass(frozen=True)
class LossWeights:
    keypoint: float = 1.0
    silhouette: float = 0.5
    chamfer: float = 0.5
    regularization: float = 1.0

    def __post_init__(self):
        for name in ("keypoint", "silhouette", "chamfer", "regularization"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights.{name} must be >= 0, got {getattr(self, name)}")


class SpatialHashGrid:
    """
    Uniform hash grid over a point set for nearest-neighbor queries.

    Each occupied cell stores its members in a padded candidate table; a
    query inspects the 27 surrounding cells. When the best candidate is
    farther than one cell (or no candidate exists) the query falls back to
    a full scan, so results are always exact.
    """
    _BITS = 20

    def __init__(self, points, cell_size):
        if cell_size <= 0:
            raise ValueError(f"cell size must be positive, got {cell_size}")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell_size = float(cell_size)
        keys = self._keys(self._cells(self.points))
        self.cell_keys, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(order.size) - np.repeat(starts, counts)
        self.table = np.full((self.cell_keys.size, int(counts.max())), -1, dtype=np.int64)
        self.table[inverse[order], slot] = order

    def _cells(self, points):
        return np.floor(points / self.cell_size).astype(np.int64)

    @classmethod
    def _keys(cls, cells):
        offset = 1 << (cls._BITS - 1)
        c = cells + offset
        return (c[:, 0] << (2 * cls._BITS)) | (c[:, 1] << cls._BITS) | c[:, 2]

    def nearest(self, queries):
        """
        Returns:
            tuple: (index of the nearest stored point per query, squared distance)
        """
        queries = np.asarray(queries, dtype=np.float64)
        cells = self._cells(queries)
        shifts = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
        neighbor_keys = self._keys((cells[:, None, :] + shifts[None, :, :]).reshape(-1, 3))
        pos = np.clip(np.searchsorted(self.cell_keys, neighbor_keys), 0, self.cell_keys.size - 1)
        found = self.cell_keys[pos] == neighbor_keys
        candidates = np.where(found[:, None], self.table[pos], -1).reshape(queries.shape[0], -1)

        valid = candidates >= 0
        diff = self.points[np.where(valid, candidates, 0)] - queries[:, None, :]
        dist2 = np.where(valid, np.sum(diff * diff, axis=2), np.inf)
        best = np.argmin(dist2, axis=1)
        rows = np.arange(queries.shape[0])
        index = candidates[rows, best]
        best_dist2 = dist2[rows, best]

        fallback = np.flatnonzero(~(best_dist2 <= self.cell_size ** 2))
        if fallback.size:
            full = np.sum((queries[fallback, None, :] - self.points[None, :, :]) ** 2, axis=2)
            index[fallback] = np.argmin(full, axis=1)
            best_dist2[fallback] = full[np.arange(fallback.size), index[fallback]]
        return index, best_dist2


@dataclass(frozen=True, eq=False)
class PixelTarget:
    """Self-supervised targets derived from one observation, in the normalized frame."""
    silhouette: np.ndarray
    resolution: int
    pitch: float
    points: np.ndarray
    cell_size: float


def resample_silhouette(silhouette, resolution):
    """Nearest-pixel resample of a square silhouette onto a `resolution` grid with the same extent."""
    n = silhouette.shape[0]
    if n == resolution:
        return np.asarray(silhouette, dtype=np.float64)
    centers = (np.arange(resolution) + 0.5) * (n / resolution) - 0.5
    rows, cols = np.meshgrid(centers, centers, indexing="ij")
    return ndimage.map_coordinates(np.asarray(silhouette, dtype=np.float64), [rows, cols], order=0,
                                   mode="constant", cval=0.0)


def pixel_target(obs, mesh, resolution=64, max_points=2048, seed=0):
    """
    Silhouette (at `resolution`) and subsampled point cloud of an
    observation, both in the frame where the canonical extent is 1.
    """
    extent = mesh.canonical_extent
    sil_pitch = obs.pixel_pitch * obs.resolution / resolution
    points = subsample_points(depth_to_pointcloud(obs), max_points, seed) / extent
    return PixelTarget(
        silhouette=resample_silhouette(obs.silhouette, resolution).reshape(-1),
        resolution=resolution,
        pitch=sil_pitch / extent,
        points=points,
        cell_size=2.0 * mesh.axis_rest_length / extent,
    )


def loss_vtx(pred, truth):
    """Mean per-vertex L1 distance."""
    return l1_distance(pred, Tensor(truth, dtype=pred.dtype))


def loss_key(pred, truth, keypoints):
    """Mean L1 distance over the keypoint vertices."""
    keypoints = np.asarray(keypoints, dtype=np.int64)
    return l1_distance(gather_rows(pred, keypoints), Tensor(np.asarray(truth)[keypoints], dtype=pred.dtype))


def loss_sil(predicted, target):
    """
    Squared pixel difference normalized by the target's squared norm
    (the binary target's pixel count).
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    norm = float(np.sum(target * target))
    if norm == 0:
        raise ShapeError("loss_sil", target.shape, detail="target silhouette is empty")
    pred = reshape(predicted, (1, target.size))
    return scale(sq_l2_distance(pred, Tensor(target.reshape(1, -1), dtype=predicted.dtype)), 1.0 / norm)


def loss_cham(points, pred, cell_size):
    """
    Mean squared distance from each observed point to its nearest
    predicted vertex. The nearest-vertex assignment is fixed during the
    backward pass.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ShapeError("loss_cham", points.shape, detail="empty point cloud")
    index, _ = SpatialHashGrid(pred.data, cell_size).nearest(points)
    return sq_l2_distance(gather_rows(pred, index), Tensor(points, dtype=pred.dtype))


def loss_regu(pred, mesh, rest_lengths=None):
    """Mean absolute deviation of predicted edge lengths from the template rest lengths."""
    rest = mesh.rest_lengths / mesh.canonical_extent if rest_lengths is None else rest_lengths
    vectors = sub(gather_rows(pred, mesh.edges[:, 1]), gather_rows(pred, mesh.edges[:, 0]))
    lengths = reshape(row_norm(vectors), (mesh.n_edges, 1))
    return l1_distance(lengths, Tensor(np.asarray(rest).reshape(-1, 1), dtype=pred.dtype))


def weighted_sum(terms, factors):
    """sum_k factors[k] * terms[k] over the keys of `factors`, skipping zero weights."""
    total = None
    for name, factor in factors.items():
        if factor == 0 or name not in terms:
            continue
        term = terms[name] if factor == 1 else scale(terms[name], factor)
        total = term if total is None else add(total, term)
    if total is None:
        raise ValueError("loss has no active terms")
    return total


def loss_total(terms, weights):
    """L_vtx + lk L_key + ls L_sil + lc L_cham + lr L_regu."""
    return weighted_sum(terms, {
        "vtx": 1.0,
        "key": weights.keypoint,
        "sil": weights.silhouette,
        "cham": weights.chamfer,
        "regu": weights.regularization,
    })


def silhouette_term(pred, mesh, target, sharpness):
    predicted = soft_silhouette(pred, mesh, target.resolution, target.pitch, sharpness)
    return loss_sil(predicted, target.silhouette)


def pixel_loss(pred, mesh, target, weights, sharpness=8.0, regularize=False):
    """
    Self-supervised objective ls L_sil + lc L_cham (+ lr L_regu when
    `regularize`), shared by test-time augmentation, tuning and mesh
    optimization.

    Returns:
        tuple: (total Tensor, dict of term Tensors)
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    terms = {
        "sil": silhouette_term(pred, mesh, target, sharpness),
        "cham": loss_cham(target.points, pred, target.cell_size),
    }
    factors = {"sil": weights.silhouette, "cham": weights.chamfer}
    if regularize:
        terms["regu"] = loss_regu(pred, mesh)
        factors["regu"] = weights.regularization
    return weighted_sum(terms, factors), terms

"""
Top-view sensing: orthographic depth rendering, the centering / 2:3
scaling normalization, camera noise, point clouds, 45-degree rotation
augmentation and the differentiable soft silhouette.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.special import expit, log_expit

from src.utils.autodiff import Function, register
from src.utils.logger import logger
from src.utils.mesh import rotate_mesh, rotation_z, translate_mesh

IMAGE_RATIO = 2.0 / 3.0


@dataclass(frozen=True)
class ObservationConfig:
    resolution: int = 96
    depth_scale: float = 0.1
    noise_sigma: float = 0.002
    noise_floor: float = 1e-4
    sharpness: float = 8.0
    silhouette_resolution: int = 64
    max_points: int = 2048

    def __post_init__(self):
        if self.resolution < 32:
            raise ValueError(f"observation resolution must be >= 32, got {self.resolution}")
        if self.sharpness <= 0 or self.depth_scale <= 0:
            raise ValueError("sharpness and depth_scale must be positive")


@dataclass(frozen=True, eq=False)
class DepthObservation:
    """
    Normalized top view. `image` is height above the table divided by
    `depth_scale`; background pixels are exactly 0. `points` live in the
    centered cloth frame in meters; `center_xy` is the world position of the
    cloth centroid that was moved to the image center.
    """
    image: np.ndarray
    pixel_pitch: float
    depth_scale: float
    center_xy: np.ndarray

    @property
    def resolution(self):
        return self.image.shape[0]

    @property
    def silhouette(self):
        return (self.image > 0).astype(np.float64)

    @property
    def points(self):
        return depth_to_pointcloud(self)


def pixel_pitch(canonical_extent, resolution):
    """Pitch (m/px) at which the longest canonical edge spans 2/3 of the image."""
    return canonical_extent / (resolution * IMAGE_RATIO)


def pixel_centers(resolution, pitch):
    """(H*W, 2) xy of pixel centers in the centered frame, row-major."""
    offsets = (np.arange(resolution) + 0.5 - resolution / 2.0) * pitch
    ys, xs = np.meshgrid(offsets, offsets, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def render_depth(mesh, resolution, pitch, positions=None):
    """
    Orthographic top-view z-buffer of the mesh triangles.

    Returns:
        tuple: (H x W height map in meters with background 0, count of skipped degenerate triangles)
    """
    if resolution < 32:
        raise ValueError(f"render resolution must be >= 32, got {resolution}")
    p = mesh.positions if positions is None else positions
    image = np.zeros((resolution, resolution))
    half = resolution / 2.0
    degenerate = 0
    for face in mesh.faces:
        a, b, c = p[face[0]], p[face[1]], p[face[2]]
        area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area2) < 1e-14:
            degenerate += 1
            continue
        xs = (a[0], b[0], c[0])
        ys = (a[1], b[1], c[1])
        c0 = max(int(np.floor(min(xs) / pitch + half - 0.5)), 0)
        c1 = min(int(np.ceil(max(xs) / pitch + half - 0.5)), resolution - 1)
        r0 = max(int(np.floor(min(ys) / pitch + half - 0.5)), 0)
        r1 = min(int(np.ceil(max(ys) / pitch + half - 0.5)), resolution - 1)
        if c0 > c1 or r0 > r1:
            continue
        px = (np.arange(c0, c1 + 1) + 0.5 - half) * pitch
        py = (np.arange(r0, r1 + 1) + 0.5 - half) * pitch
        gx, gy = np.meshgrid(px, py)
        w_b = ((gx - a[0]) * (c[1] - a[1]) - (gy - a[1]) * (c[0] - a[0])) / area2
        w_c = ((b[0] - a[0]) * (gy - a[1]) - (b[1] - a[1]) * (gx - a[0])) / area2
        w_a = 1.0 - w_b - w_c
        tol = -1e-9
        inside = (w_a >= tol) & (w_b >= tol) & (w_c >= tol)
        if not inside.any():
            continue
        z = w_a * a[2] + w_b * b[2] + w_c * c[2]
        window = image[r0:r1 + 1, c0:c1 + 1]
        np.maximum(window, np.where(inside, z, 0.0), out=window)
    if degenerate:
        logger.debug(f"render_depth skipped {degenerate} degenerate triangles")
    return image, degenerate


def normalize_mesh(mesh):
    """Move the cloth's horizontal centroid to the origin (image center)."""
    centroid = mesh.positions[:, :2].mean(axis=0)
    return translate_mesh(mesh, -centroid)


def observe(mesh, config, canonical_extent):
    """
    Render the normalized observation of a world-frame mesh.

    Returns:
        tuple: (DepthObservation, centered ClothMesh)
    """
    center = mesh.positions[:, :2].mean(axis=0)
    centered = normalize_mesh(mesh)
    pitch = pixel_pitch(canonical_extent, config.resolution)
    raw, _ = render_depth(centered, config.resolution, pitch)
    obs = DepthObservation(image=raw / config.depth_scale, pixel_pitch=pitch,
                           depth_scale=config.depth_scale, center_xy=center)
    return obs, centered


def normalize_image(raw_depth_m, pitch, depth_scale, center_xy=(0.0, 0.0)):
    """
    Normalize an external height map already sampled at the canonical
    pitch: shift the silhouette centroid to the image center (whole pixels)
    and divide heights by `depth_scale`.
    """
    raw = np.asarray(raw_depth_m, dtype=np.float64)
    mask = raw > 0
    if not mask.any():
        return DepthObservation(image=np.zeros_like(raw), pixel_pitch=pitch, depth_scale=depth_scale,
                                center_xy=np.asarray(center_xy, dtype=np.float64))
    rows, cols = np.nonzero(mask)
    mid = (raw.shape[0] - 1) / 2.0
    shift_r = int(np.round(mid - rows.mean()))
    shift_c = int(np.round(mid - cols.mean()))
    shifted = ndimage.shift(raw, (shift_r, shift_c), order=0, cval=0.0)
    center = np.asarray(center_xy, dtype=np.float64) - np.array([shift_c, shift_r]) * pitch
    return DepthObservation(image=shifted / depth_scale, pixel_pitch=pitch, depth_scale=depth_scale,
                            center_xy=center)


def add_noise(image, sigma, seed, floor=1e-4):
    """
    Gaussian noise on cloth pixels only. Background stays exactly 0; cloth
    pixels are clamped at `floor` so noise never removes them from the
    silhouette.
    """
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=image.shape)
    cloth = image > 0
    return np.where(cloth, np.maximum(image + noise, floor), 0.0)


def noisy(obs, sigma_m, seed, floor=1e-4):
    """Observation with camera noise given in meters."""
    return replace(obs, image=add_noise(obs.image, sigma_m / obs.depth_scale, seed, floor))


def depth_to_pointcloud(obs):
    """Back-project every nonzero pixel to (x, y, z) in the centered frame, meters."""
    centers = pixel_centers(obs.resolution, obs.pixel_pitch)
    flat = obs.image.reshape(-1)
    keep = flat > 0
    return np.column_stack([centers[keep], flat[keep] * obs.depth_scale])


def subsample_points(points, max_points, seed):
    """Seed-deterministic subsample to at most `max_points` rows (order preserved)."""
    if points.shape[0] <= max_points:
        return points
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(points.shape[0], size=max_points, replace=False))
    return points[keep]


def rotate_image(image, angle):
    """Rotate image content by `angle` (radians, counter-clockwise in xy) about its center, bilinear."""
    n = image.shape[0]
    mid = (n - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    rot = rotation_z(-angle)[:2, :2]
    x, y = cols - mid, rows - mid
    src_x = rot[0, 0] * x + rot[0, 1] * y + mid
    src_y = rot[1, 0] * x + rot[1, 1] * y + mid
    coords = np.stack([src_y, src_x])
    snapped = np.round(coords)
    coords = np.where(np.abs(coords - snapped) < 1e-9, snapped, coords)
    out = ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=0.0)
    out[out < 1e-12] = 0.0
    return out


def rotate_obs(obs, k):
    """Observation rotated by k x 45 degrees."""
    return replace(obs, image=rotate_image(obs.image, k * np.pi / 4.0))


def unrotate_mesh(mesh, k):
    """Exact inverse of the k x 45 degree rotation applied to an observation."""
    return rotate_mesh(mesh, -k * np.pi / 4.0)


def coverage_area(silhouette):
    return float(np.sum(np.asarray(silhouette) > 0.5))


_EDGE_ENDS = ((0, 1), (1, 2), (2, 0))
_FACE_CHUNK = 64


def edge_distances(xy, faces, q):
    """(F, 3, P) signed distances of pixels `q` to the three edge lines of each face, positive inside."""
    return _edge_terms(xy, faces, q)[0]


def _edge_terms(xy, faces, q):
    """Per-face edge geometry and signed distances; the face distance is its most violated edge line."""
    a = xy[faces[:, 0]]
    b = xy[faces[:, 1]]
    c = xy[faces[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    valid = np.abs(area2) > 1e-12
    orient = np.where(area2 >= 0, 1.0, -1.0)
    starts = np.stack([xy[faces[:, s]] for s, _ in _EDGE_ENDS], axis=1)
    ends = np.stack([xy[faces[:, e]] for _, e in _EDGE_ENDS], axis=1)
    e = ends - starts
    length = np.linalg.norm(e, axis=2)
    length = np.where(length > 0, length, 1.0)
    u = q[None, None, :, :] - starts[:, :, None, :]
    cross = e[:, :, None, 0] * u[..., 1] - e[:, :, None, 1] * u[..., 0]
    d_all = orient[:, None, None] * cross / length[:, :, None]
    which = np.argmin(d_all, axis=1)
    return d_all, which, valid, orient, e, length, u


def _face_distances(xy, faces, q):
    d_all, which, valid, orient, e, length, u = _edge_terms(xy, faces, q)
    d = np.take_along_axis(d_all, which[:, None, :], axis=1)[:, 0, :]
    return d, which, valid, orient, e, length, u


@register("soft_silhouette")
class SoftSilhouette(Function):
    """
    Per-pixel occupancy 1 - prod_f (1 - sigmoid(sharpness * d_f)), with
    d_f the signed distance into face f in units of `extent`.
    Differentiable with respect to vertex xy.
    """

    @staticmethod
    def forward(ctx, positions, faces=None, pixels=None, sharpness=8.0, extent=1.0):
        xy = positions[:, :2] / extent
        q = pixels / extent
        log_empty = np.zeros(q.shape[0], dtype=positions.dtype)
        for lo in range(0, faces.shape[0], _FACE_CHUNK):
            chunk = faces[lo:lo + _FACE_CHUNK]
            d, _, valid, *_ = _face_distances(xy, chunk, q)
            log_empty += np.sum(np.where(valid[:, None], log_expit(-sharpness * d), 0.0), axis=0)
        ctx.save(positions=positions, faces=faces, pixels=pixels, sharpness=sharpness, extent=extent,
                 log_empty=log_empty)
        return 1.0 - np.exp(log_empty)

    @staticmethod
    def backward(ctx, grad):
        s = ctx.sharpness
        xy = ctx.positions[:, :2] / ctx.extent
        q = ctx.pixels / ctx.extent
        empty = np.exp(ctx.log_empty)
        grad_xy = np.zeros_like(xy)
        for lo in range(0, ctx.faces.shape[0], _FACE_CHUNK):
            chunk = ctx.faces[lo:lo + _FACE_CHUNK]
            d, which, valid, orient, e, length, u = _face_distances(xy, chunk, q)
            g = (grad * empty)[None, :] * s * expit(s * d)
            g = np.where(valid[:, None], g, 0.0)
            for k, (s_idx, e_idx) in enumerate(_EDGE_ENDS):
                mask = which == k
                if not mask.any():
                    continue
                gk = np.where(mask, g, 0.0)
                ek = e[:, k, :]
                lk = length[:, k]
                uk = u[:, k, :, :]
                crossk = ek[:, None, 0] * uk[..., 1] - ek[:, None, 1] * uk[..., 0]
                sign = orient[:, None]
                dd_du = sign[..., None] * np.stack([-ek[:, 1], ek[:, 0]], axis=1)[:, None, :] / lk[:, None, None]
                dd_de = sign[..., None] * (
                    np.stack([uk[..., 1], -uk[..., 0]], axis=2) / lk[:, None, None]
                    - crossk[..., None] * ek[:, None, :] / (lk ** 3)[:, None, None]
                )
                grad_start = np.sum(gk[..., None] * (-dd_du - dd_de), axis=1)
                grad_end = np.sum(gk[..., None] * dd_de, axis=1)
                np.add.at(grad_xy, chunk[:, s_idx], grad_start)
                np.add.at(grad_xy, chunk[:, e_idx], grad_end)
        grad_positions = np.zeros_like(ctx.positions)
        grad_positions[:, :2] = grad_xy / ctx.extent
        return (grad_positions,)


def soft_silhouette(positions, mesh, resolution, pitch, sharpness=8.0):
    """
    Differentiable silhouette of (centered) vertex positions.

    Args:
        positions (Tensor): (N, 3) vertex positions in meters
        mesh (ClothMesh): Topology providing the faces
        resolution (int): Output side in pixels
        pitch (float): Pixel pitch in meters
        sharpness (float): Sigmoid slope per pixel of signed distance; at the
            default 8 a pixel centre half a pixel outside a lone edge reads below 0.02

    Returns:
        Tensor: (resolution * resolution,) occupancy in [0, 1], row-major
    """
    if sharpness <= 0:
        raise ValueError(f"sharpness must be positive, got {sharpness}")
    return SoftSilhouette.apply(positions, faces=mesh.faces, pixels=pixel_centers(resolution, pitch),
                                sharpness=float(sharpness), extent=float(pitch))

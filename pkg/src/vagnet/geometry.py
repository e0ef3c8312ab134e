"""Point sampling, grouping, interpolation and pinhole projection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, matmul


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    coords: np.ndarray
    heatmap: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise GeometryError(f"coords must be N x 3, got {self.coords.shape}")
        if self.coords.shape[0] < 4:
            raise GeometryError(f"need at least 4 points, got {self.coords.shape[0]}")
        if not np.all(np.isfinite(self.coords)):
            raise GeometryError("coords contain non-finite values")
        if self.heatmap is not None:
            self.heatmap = np.asarray(self.heatmap).reshape(-1)
            if self.heatmap.shape[0] != self.coords.shape[0]:
                raise GeometryError("heatmap length differs from point count")
            if self.heatmap.min() < 0 or self.heatmap.max() > 1:
                raise GeometryError("heatmap values must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class CameraParams:
    eye: tuple[float, float, float]
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    focal: float = 2.0
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        eye, at, up = (np.asarray(v, dtype=float) for v in (self.eye, self.look_at, self.up))
        fwd = at - eye
        if np.linalg.norm(fwd) == 0:
            raise GeometryError("camera eye coincides with look_at")
        if np.linalg.norm(np.cross(fwd, up)) < 1e-9 * np.linalg.norm(fwd) * max(np.linalg.norm(up), 1e-300):
            raise GeometryError("camera up vector is parallel to the viewing direction")
        if not self.focal > 0:
            raise GeometryError("focal length must be positive")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the camera frame."""
        eye, at, up = (np.asarray(v, dtype=float) for v in (self.eye, self.look_at, self.up))
        fwd = at - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return right, true_up, fwd


@dataclass
class ProjectedImage:
    pixels: np.ndarray                 # 1 x H x W, values in [0, 1]
    pixel_of_point: np.ndarray         # N x 2 int (row, col); -1 where not visible
    depth: np.ndarray = field(repr=False, default=None)  # camera-space depth per point
    empty: bool = False

    @property
    def visible(self) -> np.ndarray:
        return self.pixel_of_point[:, 0] >= 0


# ---------------------------------------------------------------------------
# sampling / grouping


def farthest_point_sample(coords: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection; ties go to the lowest index."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"farthest_point_sample needs 1 <= k <= N (k={k}, N={n})")
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = start
    dist = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return chosen


def ball_query(coords: np.ndarray, centers: np.ndarray, radius: float, max_neighbors: int,
               center_coords: np.ndarray | None = None) -> np.ndarray:
    """Neighbour lists (nearest first, center first), padded by repeating the center.

    ``centers`` index into ``coords``. Returns an int array len(centers) x max_neighbors.
    """
    if not radius > 0:
        raise GeometryError("ball_query radius must be positive")
    coords = np.asarray(coords, dtype=float)
    centers = np.asarray(centers, dtype=np.intp)
    cc = coords[centers] if center_coords is None else center_coords
    d2 = np.sum((cc[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    d2[np.arange(len(centers)), centers] = -1.0  # self sorts first
    order = np.argsort(d2, axis=1, kind="stable")[:, :max_neighbors]
    within = np.take_along_axis(d2, order, axis=1) <= radius * radius
    out = np.where(within, order, centers[:, None])
    if out.shape[1] < max_neighbors:
        pad = np.repeat(centers[:, None], max_neighbors - out.shape[1], axis=1)
        out = np.concatenate([out, pad], axis=1)
    return out


def knn_weights(src_coords: np.ndarray, dst_coords: np.ndarray, k: int = 3) -> np.ndarray:
    """M x N matrix of normalised inverse-distance weights (k nonzeros per column)."""
    src_coords = np.asarray(src_coords, dtype=float)
    dst_coords = np.asarray(dst_coords, dtype=float)
    m = src_coords.shape[0]
    if m < k:
        raise GeometryError(f"knn_interpolate needs at least k={k} sources, got {m}")
    d = np.sqrt(np.sum((dst_coords[:, None, :] - src_coords[None, :, :]) ** 2, axis=2))
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    w = 1.0 / (np.take_along_axis(d, nn, axis=1) + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    weights = np.zeros((m, dst_coords.shape[0]))
    cols = np.repeat(np.arange(dst_coords.shape[0]), k)
    np.add.at(weights, (nn.ravel(), cols), w.ravel())
    return weights


def knn_interpolate(src_coords, src_feats, dst_coords, k: int = 3, weights: np.ndarray | None = None) -> Tensor:
    """C x M features -> C x N by inverse-distance weighting of k nearest sources."""
    src_feats = as_tensor(src_feats)
    if weights is None:
        weights = knn_weights(src_coords, dst_coords, k)
    return matmul(src_feats, Tensor(weights))


# ---------------------------------------------------------------------------
# projection


def camera_space(coords: np.ndarray, cam: CameraParams) -> np.ndarray:
    right, up, fwd = cam.basis()
    rel = np.asarray(coords, dtype=float) - np.asarray(cam.eye, dtype=float)
    return np.stack([rel @ right, rel @ up, rel @ fwd], axis=1)


def image_coords(coords: np.ndarray, cam: CameraParams) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) image positions and depths; pixel (r, c) spans [r, r+1) x [c, c+1)."""
    h, w = cam.image_size
    xyz = camera_space(coords, cam)
    z = xyz[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = w / 2 + cam.focal * (w / 2) * xyz[:, 0] / z
        row = h / 2 - cam.focal * (h / 2) * xyz[:, 1] / z
    return np.stack([row, col], axis=1), z


def project_points(coords: np.ndarray, cam: CameraParams, near: float = 1e-2) -> ProjectedImage:
    """Single-pixel splats with a z-buffer; intensity 1 at the nearest visible depth.

    Depth is normalised over the winning points and halved, so visible
    intensities lie in [0.5, 1] and stay distinct from the empty background.
    """
    coords = coords.coords if isinstance(coords, PointCloud) else np.asarray(coords, dtype=float)
    h, w = cam.image_size
    rc, z = image_coords(coords, cam)
    n = coords.shape[0]
    pix = np.full((n, 2), -1, dtype=np.int64)
    pixels = np.zeros((1, h, w))
    front = z > near
    if not np.any(front):
        warnings.warn("all points are behind the camera; returning an empty image")
        return ProjectedImage(pixels, pix, z, empty=True)
    rc = np.where(front[:, None], rc, -1.0)
    ri = np.floor(rc[:, 0]).astype(np.int64)
    ci = np.floor(rc[:, 1]).astype(np.int64)
    inside = front & (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return ProjectedImage(pixels, pix, z, empty=True)
    flat = ri[idx] * w + ci[idx]
    # nearest point per pixel; lexsort is stable so equal depths keep the lowest index
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = idx[order[first]]
    zw = z[winners]
    span = zw.max() - zw.min()
    ndepth = (zw - zw.min()) / (2 * span) if span > 0 else np.zeros_like(zw)
    pixels[0, ri[winners], ci[winners]] = 1.0 - ndepth
    pix[winners, 0] = ri[winners]
    pix[winners, 1] = ci[winners]
    return ProjectedImage(pixels, pix, z)


# ---------------------------------------------------------------------------
# viewpoint selection


@lru_cache(maxsize=None)
def icosphere(subdivisions: int = 1) -> np.ndarray:
    """Unit icosphere vertices (12 at level 0, 42 at level 1)."""
    phi = (1 + 5 ** 0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    out = np.array(verts)
    out.setflags(write=False)
    return out


def orbit_camera(center, direction, distance: float, focal: float = 2.0,
                 image_size: tuple[int, int] = (32, 32)) -> CameraParams:
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    up = (0.0, 0.0, 1.0) if abs(direction[2]) < 0.99 else (0.0, 1.0, 0.0)
    eye = np.asarray(center, dtype=float) + distance * direction
    return CameraParams(tuple(eye.tolist()), tuple(np.asarray(center, dtype=float).tolist()), up, focal, image_size)


def default_candidates(coords: np.ndarray, distance: float = 2.5, focal: float = 2.0,
                       image_size: tuple[int, int] = (32, 32)) -> list[CameraParams]:
    centroid = np.asarray(coords, dtype=float).mean(axis=0)
    return [orbit_camera(centroid, d, distance, focal, image_size) for d in icosphere(1)]


def viewpoint_scores(pc: PointCloud, candidates: list[CameraParams]) -> np.ndarray:
    if pc.heatmap is None:
        raise GeometryError("viewpoint selection needs a heatmap")
    scores = np.empty(len(candidates))
    for i, cam in enumerate(candidates):
        vis = project_points(pc.coords, cam).visible
        scores[i] = pc.heatmap[vis].sum()
    return scores


def select_viewpoint(pc: PointCloud, candidates: list[CameraParams] | None = None,
                     rtol: float = 1e-9) -> CameraParams:
    """Candidate seeing the most heatmap mass; near-ties (within rtol) go to the earliest."""
    if candidates is None:
        candidates = default_candidates(pc.coords)
    if not candidates:
        raise GeometryError("select_viewpoint needs at least one candidate camera")
    scores = viewpoint_scores(pc, candidates)
    best = scores.max()
    tol = rtol * max(abs(best), 1.0)
    return candidates[int(np.flatnonzero(scores >= best - tol)[0])]

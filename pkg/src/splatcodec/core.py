"""Domain types for the anchor/coupled primitive hierarchy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import IDENTITY_QUAT, covariance_from_params

REF_DIM = 32
RES_DIM = 8
DEFAULT_K = 10
COV_DIM = 7  # 3 log-scales + quaternion


def _vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    return a


@dataclass(frozen=True)
class AnchorPrimitive:
    location: np.ndarray
    cov_scale: np.ndarray
    cov_rotation: np.ndarray
    ref_embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location", _vec(self.location, 3, "location"))
        object.__setattr__(self, "cov_scale", _vec(self.cov_scale, 3, "cov_scale"))
        object.__setattr__(self, "cov_rotation", _vec(self.cov_rotation, 4, "cov_rotation"))
        object.__setattr__(self, "ref_embedding", _vec(self.ref_embedding, REF_DIM, "ref_embedding"))
        if abs(np.linalg.norm(self.cov_rotation) - 1.0) > 1e-6:
            raise ValueError("cov_rotation must be a unit quaternion")
        with np.errstate(over="ignore"):
            extent = np.exp(self.cov_scale)
        if not (np.all(np.isfinite(extent)) and np.all(extent > 0)):
            raise ValueError("cov_scale must exponentiate to finite positive extents")

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.cov_scale, self.cov_rotation)


@dataclass(frozen=True)
class CoupledPrimitive:
    anchor_index: int
    res_embedding: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "res_embedding", _vec(self.res_embedding, RES_DIM, "res_embedding"))
        if self.anchor_index < 0:
            raise ValueError("anchor_index must be non-negative")


@dataclass(frozen=True)
class RenderableGaussian:
    location: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "location", _vec(self.location, 3, "location"))
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (3, 3):
            raise ValueError("covariance must be 3x3")
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "opacity", float(np.clip(self.opacity, 0.0, 1.0)))
        object.__setattr__(self, "color", np.clip(_vec(self.color, 3, "color"), 0.0, 1.0))


@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera space."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal_point: np.ndarray
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = _vec(self.translation, 3, "translation")
        self.focal = _vec(self.focal, 2, "focal")
        self.principal_point = _vec(self.principal_point, 2, "principal_point")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation must be orthonormal")
        if np.any(self.focal <= 0):
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, (focal, focal), (width / 2, height / 2), (width, height))


@dataclass
class Scene:
    """Anchors stored as parallel arrays; coupled embeddings as ``(N, K, 8)``.

    Coupled primitive ``j`` belongs to anchor ``j // K`` (anchor-major order).
    """

    location: np.ndarray
    cov_scale: np.ndarray
    cov_rotation: np.ndarray
    ref_embedding: np.ndarray
    res_embedding: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.location)
        if self.res_embedding is None:
            self.res_embedding = np.zeros((n, 0, RES_DIM))
        self.validate()

    def validate(self):
        n = len(self.location)
        shapes = {
            "location": (self.location, (n, 3)),
            "cov_scale": (self.cov_scale, (n, 3)),
            "cov_rotation": (self.cov_rotation, (n, 4)),
            "ref_embedding": (self.ref_embedding, (n, REF_DIM)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        r = self.res_embedding
        if r.ndim != 3 or r.shape[0] != n or r.shape[2] != RES_DIM:
            raise ValueError(f"res_embedding has shape {r.shape}, expected ({n}, K, {RES_DIM})")

    @property
    def K(self) -> int:
        return self.res_embedding.shape[1]

    @property
    def n_anchors(self) -> int:
        return len(self.location)

    @property
    def n_coupled(self) -> int:
        return self.n_anchors * self.K

    def anchor(self, i: int) -> AnchorPrimitive:
        return AnchorPrimitive(self.location[i], self.cov_scale[i],
                               self.cov_rotation[i], self.ref_embedding[i])

    @property
    def anchors(self) -> list[AnchorPrimitive]:
        return [self.anchor(i) for i in range(self.n_anchors)]

    @property
    def coupled(self) -> list[CoupledPrimitive]:
        return [CoupledPrimitive(i, self.res_embedding[i, k])
                for i in range(self.n_anchors) for k in range(self.K)]

    @classmethod
    def from_primitives(cls, anchors, coupled=(), K=None) -> "Scene":
        anchors = list(anchors)
        coupled = list(coupled)
        n = len(anchors)
        if K is None:
            K = len(coupled) // n if n else 0
        if len(coupled) != K * n:
            raise ValueError(f"expected {K * n} coupled primitives, got {len(coupled)}")
        res = np.zeros((n, K, RES_DIM))
        slots = np.zeros(n, dtype=int)
        for c in coupled:
            if c.anchor_index >= n:
                raise ValueError(f"anchor_index {c.anchor_index} out of range")
            if slots[c.anchor_index] >= K:
                raise ValueError(f"anchor {c.anchor_index} has more than K={K} coupled primitives")
            res[c.anchor_index, slots[c.anchor_index]] = c.res_embedding
            slots[c.anchor_index] += 1
        return cls(
            np.array([a.location for a in anchors]).reshape(n, 3),
            np.array([a.cov_scale for a in anchors]).reshape(n, 3),
            np.array([a.cov_rotation for a in anchors]).reshape(n, 4),
            np.array([a.ref_embedding for a in anchors]).reshape(n, REF_DIM),
            res,
        )

    def copy(self) -> "Scene":
        return Scene(self.location.copy(), self.cov_scale.copy(), self.cov_rotation.copy(),
                     self.ref_embedding.copy(), self.res_embedding.copy())

    def take(self, idx) -> "Scene":
        """Sub-scene with the anchors at ``idx`` (and their coupled primitives)."""
        idx = np.asarray(idx)
        return Scene(self.location[idx], self.cov_scale[idx], self.cov_rotation[idx],
                     self.ref_embedding[idx], self.res_embedding[idx])


def init_anchors(points, voxel_size: float, seed: int = 0) -> list[AnchorPrimitive]:
    """One anchor per occupied voxel, placed at the centroid of its points.

    Points are sorted first so the result does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("no points")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = pts[np.lexsort(pts.T[::-1])]
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]

    if len(centroids) > 1:
        dist, _ = cKDTree(centroids).query(centroids, k=2)
        extent = float(np.mean(dist[:, 1]))
    else:
        extent = voxel_size
    extent = max(extent, 1e-6)

    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 0.01, size=(len(centroids), REF_DIM))
    log_extent = np.full(3, np.log(extent))
    return [AnchorPrimitive(c, log_extent, IDENTITY_QUAT, e) for c, e in zip(centroids, emb)]


def attach_coupled(anchors, K: int = DEFAULT_K) -> Scene:
    if K < 1:
        raise ValueError("K must be >= 1")
    scene = Scene.from_primitives(anchors, [], K=0)
    scene.res_embedding = np.zeros((scene.n_anchors, K, RES_DIM))
    return scene


def prune_anchors(scene: Scene, rendered_opacity_stats, threshold: float) -> Scene:
    """Drop anchors whose accumulated max opacity is below ``threshold``."""
    stats = np.asarray(rendered_opacity_stats, dtype=np.float64)
    if stats.shape != (scene.n_anchors,):
        raise ValueError("opacity stats must cover every anchor")
    keep = np.flatnonzero(stats >= threshold)
    if len(keep) == 0:
        raise ValueError("scene emptied")
    if len(keep) == scene.n_anchors:
        return scene
    return scene.take(keep)

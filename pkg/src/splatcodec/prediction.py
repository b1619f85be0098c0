"""Derive renderable Gaussians for coupled primitives from their anchors.

Geometry comes from an affine warp of the anchor (translation, per-axis
scaling and a rotation offset, all predicted from the fused embeddings);
appearance from view-conditioned networks. Everything here works on plain
arrays and on tape tensors, so the same code serves training and decoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import REF_DIM, RES_DIM, AnchorPrimitive, Camera, CoupledPrimitive, RenderableGaussian, Scene
from .geometry import IDENTITY_QUAT, covariance_from_params, quat_multiply, quat_normalize
from .mlp import init_mlp, mlp_forward, zero_mlp

FEATURE_DIM = REF_DIM + RES_DIM
VIEW_DIM = 4
NET_IO = {
    "translation": (FEATURE_DIM, 3),
    "scale": (FEATURE_DIM, 3),
    "rotation": (FEATURE_DIM, 4),
    "opacity": (VIEW_DIM + FEATURE_DIM, 1),
    "color": (VIEW_DIM + FEATURE_DIM, 3),
}


@dataclass
class PredictionNetworks:
    """Five residual MLPs keyed by what they predict."""

    params: dict[str, dict[str, np.ndarray]]

    @classmethod
    def init(cls, rng) -> "PredictionNetworks":
        return cls({name: init_mlp(i, o, rng) for name, (i, o) in NET_IO.items()})

    @classmethod
    def zeros(cls) -> "PredictionNetworks":
        return cls({name: zero_mlp(i, o) for name, (i, o) in NET_IO.items()})

    def __getitem__(self, name):
        return self.params[name]


@dataclass(frozen=True)
class AffineParams:
    translation: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale components must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be a unit quaternion")


@dataclass(frozen=True)
class ViewEmbedding:
    direction: np.ndarray
    inv_distance: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.direction, [self.inv_distance]])


# -- batched building blocks (arrays or tensors) ------------------------------

def fuse_features(ref, res):
    """Concatenate reference ``(B, 32)`` and residual ``(B, 8)`` embeddings."""
    return ad.concatenate([ref, res], axis=-1)


def affine_outputs(h, nets: PredictionNetworks):
    """Raw network outputs: translation, log-scale, rotation offset."""
    t = mlp_forward(nets["translation"], h)
    log_s = mlp_forward(nets["scale"], h)
    q = quat_normalize(mlp_forward(nets["rotation"], h) + IDENTITY_QUAT)
    return t, log_s, q


def warp_geometry(location, cov_scale, cov_rotation, t, log_s, q):
    """Compose anchor geometry with the predicted warp."""
    loc = location + t
    scale = cov_scale + log_s
    rot = quat_normalize(quat_multiply(q, quat_normalize(cov_rotation)))
    return loc, scale, rot


def view_features(location, center):
    """Unit direction from the camera centre plus inverse distance, ``(N, 4)``."""
    d = location - center
    dist = ad.sqrt(ad.sum_(d * d, axis=-1, keepdims=True))
    if np.any(ad.value(dist) == 0):
        raise ValueError("degenerate view")
    inv = 1.0 / dist
    return ad.concatenate([d * inv, inv], axis=-1)


def appearance_outputs(view, h, nets: PredictionNetworks):
    x = ad.concatenate([view, h], axis=-1)
    opacity = ad.sigmoid(mlp_forward(nets["opacity"], x))[..., 0]
    color = ad.sigmoid(mlp_forward(nets["color"], x))
    return opacity, color


def predict_gaussians(location, cov_scale, cov_rotation, ref, res, center, nets):
    """Renderable attributes of every coupled primitive, anchor-major.

    ``location/cov_scale/cov_rotation/ref`` are per anchor ``(N, .)`` and
    ``res`` is ``(N, K, 8)``. Returns means ``(N*K, 3)``, covariances
    ``(N*K, 3, 3)``, opacities ``(N*K,)`` and colors ``(N*K, 3)``.
    """
    n, k = ad.value(res).shape[:2]
    rep = np.repeat(np.arange(n), k)
    h = fuse_features(ref[rep], ad.reshape(res, (n * k, RES_DIM)))
    t, log_s, q = affine_outputs(h, nets)
    loc, scale, rot = warp_geometry(location[rep], cov_scale[rep], cov_rotation[rep], t, log_s, q)
    view = view_features(location, center)[rep]
    opacity, color = appearance_outputs(view, h, nets)
    return loc, covariance_from_params(scale, rot), opacity, color


# -- per-primitive operations -------------------------------------------------

def fuse(anchor: AnchorPrimitive, coupled: CoupledPrimitive) -> np.ndarray:
    return np.concatenate([anchor.ref_embedding, coupled.res_embedding])


def predict_affine(h, nets: PredictionNetworks) -> AffineParams:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (FEATURE_DIM,):
        raise ValueError(f"prediction features must have length {FEATURE_DIM}")
    t, log_s, q = affine_outputs(h[None], nets)
    return AffineParams(t[0], np.exp(log_s[0]), q[0])


def apply_affine(anchor: AnchorPrimitive, params: AffineParams):
    loc, scale, rot = warp_geometry(anchor.location, anchor.cov_scale, anchor.cov_rotation,
                                    params.translation, np.log(params.scale), params.rotation)
    return loc, scale, rot


def view_embedding(camera: Camera, anchor: AnchorPrimitive) -> ViewEmbedding:
    v = view_features(anchor.location[None], camera.center)[0]
    return ViewEmbedding(v[:3], float(v[3]))


def predict_appearance(h, eps: ViewEmbedding, nets: PredictionNetworks):
    opacity, color = appearance_outputs(eps.as_array()[None], np.asarray(h, dtype=np.float64)[None], nets)
    return float(opacity[0]), color[0]


def decode_coupled(scene: Scene, camera: Camera, nets: PredictionNetworks) -> list[RenderableGaussian]:
    means, covs, opacity, color = predict_gaussians(
        scene.location, scene.cov_scale, scene.cov_rotation, scene.ref_embedding,
        scene.res_embedding, camera.center, nets)
    return [RenderableGaussian(m, c, o, col) for m, c, o, col in zip(means, covs, opacity, color)]

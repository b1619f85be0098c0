"""EWA splatting on the CPU, rendering loss and image metrics.

Images are ``(height, width, 3)`` float arrays in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _backend
from . import autodiff as ad
from ._pykernels import SKIP_POWER
from .core import Camera, RenderableGaussian

LOW_PASS = 0.3
NEAR = 0.01
SSIM_WEIGHT = 0.2
PSNR_CAP = 100.0


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class ProjectedSplats:
    """Visible splats in compositing order; fields may be tape tensors."""

    mean2d: object
    cov2d: object
    conic: object
    opacity: object
    color: object
    depth: np.ndarray
    radius: np.ndarray
    source: np.ndarray  # index of each splat in the input sequence


def gaussians_to_arrays(gaussians):
    gaussians = list(gaussians)
    if not gaussians:
        return np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3))
    return (np.array([g.location for g in gaussians]), np.array([g.covariance for g in gaussians]),
            np.array([g.opacity for g in gaussians]), np.array([g.color for g in gaussians]))


def _project_all(means, covs, cam: Camera):
    """Camera-space depth, 2D means and low-passed 2D covariances for all inputs."""
    rot = cam.rotation
    p = means @ rot.T + cam.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    zv = ad.value(z)
    safe = np.where(zv > NEAR, 0.0, 1.0 - zv)  # culled rows sit at z = 1; they are dropped later
    z = z + safe
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    inv_z = 1.0 / z
    mean2d = ad.stack([fx * x * inv_z + cx, fy * y * inv_z + cy], axis=-1)
    zeros = np.zeros(len(zv))
    jac = ad.stack([
        ad.stack([fx * inv_z, zeros, -fx * x * inv_z * inv_z], axis=-1),
        ad.stack([zeros, fy * inv_z, -fy * y * inv_z * inv_z], axis=-1),
    ], axis=-2)
    t = jac @ rot
    cov2d = t @ covs @ ad.swapaxes(t, -1, -2) + LOW_PASS * np.eye(2)
    return zv, mean2d, cov2d


def _max_eig2(cov):
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    return mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))


def project_splats(means, covs, opacity, colors, cam: Camera) -> ProjectedSplats:
    """Project, cull and depth-sort. Ties in depth are broken by the splat's
    own attributes so the order never depends on input position."""
    depth, mean2d, cov2d = _project_all(means, covs, cam)
    m2 = ad.value(mean2d)
    c2 = ad.value(cov2d)
    lam = _max_eig2(c2) if len(c2) else np.zeros(0)
    sigma3 = 3.0 * np.sqrt(lam)
    w, h = cam.resolution
    keep = ((depth > NEAR)
            & (m2[:, 0] >= -sigma3) & (m2[:, 0] <= w + sigma3)
            & (m2[:, 1] >= -sigma3) & (m2[:, 1] <= h + sigma3))
    idx = np.flatnonzero(keep)
    op_v, col_v = ad.value(opacity), ad.value(colors)
    keys = [col_v[idx, 2], col_v[idx, 1], col_v[idx, 0], op_v[idx],
            c2[idx, 1, 1], c2[idx, 0, 1], c2[idx, 0, 0], m2[idx, 1], m2[idx, 0], depth[idx]]
    order = idx[np.lexsort(keys)] if len(idx) else idx

    cov_s = cov2d[order]
    a, b, c = cov_s[:, 0, 0], cov_s[:, 0, 1], cov_s[:, 1, 1]
    det = a * c - b * b
    conic = ad.stack([c / det, -b / det, a / det], axis=-1)
    radius = np.sqrt(SKIP_POWER * lam[order]) + 1.0 if len(order) else np.zeros(0)
    return ProjectedSplats(mean2d[order], cov_s, conic, opacity[order], colors[order],
                           depth[order], radius, order)


def project(g: RenderableGaussian, cam: Camera):
    """Single-Gaussian projection; ``None`` when culled."""
    ps = project_splats(g.location[None], g.covariance[None], np.array([g.opacity]),
                        g.color[None], cam)
    if len(ps.source) == 0:
        return None
    return Splat2D(ps.mean2d[0], ps.cov2d[0], float(ps.depth[0]), float(ps.opacity[0]), ps.color[0])


def _contiguous(x):
    return np.ascontiguousarray(ad.value(x), dtype=np.float64)


def rasterize(ps: ProjectedSplats, width, height, background, early_exit=True):
    """Composite projected splats; differentiable w.r.t. means, conics,
    opacities and colors when those are tape tensors."""
    k = _backend.kernels
    bg = np.ascontiguousarray(background, dtype=np.float64)
    args = (_contiguous(ps.mean2d).reshape(-1, 2), _contiguous(ps.conic).reshape(-1, 3),
            _contiguous(ps.opacity).reshape(-1), _contiguous(ps.color).reshape(-1, 3),
            np.ascontiguousarray(ps.radius, dtype=np.float64))
    nthreads = _backend.threads()
    image, final_t, n_contrib = k.rasterize_forward(*args, width, height, bg, early_exit,
                                                    16, nthreads)

    def vjp(g):
        grads = k.rasterize_backward(*args, width, height, bg, final_t, n_contrib,
                                     np.ascontiguousarray(g), 16, nthreads)
        return grads

    out = ad.custom(image, (ps.mean2d, ps.conic, ps.opacity, ps.color), vjp)
    return ad.clip(out, 0.0, 1.0)


def render_arrays(means, covs, opacity, colors, cam: Camera, background=(0.0, 0.0, 0.0),
                  early_exit=True):
    ps = project_splats(means, covs, opacity, colors, cam)
    return rasterize(ps, cam.width, cam.height, background, early_exit)


def render(gaussians, cam: Camera, background=(0.0, 0.0, 0.0), early_exit=True) -> np.ndarray:
    return ad.value(render_arrays(*gaussians_to_arrays(gaussians), cam, background, early_exit))


def render_reference(gaussians, cam: Camera, background=(0.0, 0.0, 0.0), early_exit=False,
                     exp=None) -> np.ndarray:
    """Brute-force per-pixel compositing over every projected splat.

    No tiling and no pixel culling, only the per-pair cutoff shared with the
    tiled kernels; ``exp`` defaults to the scalar exponential
    used by the active kernel backend.
    """
    exp = exp or _backend.scalar_exp
    ps = project_splats(*gaussians_to_arrays(gaussians), cam)
    means = ad.value(ps.mean2d).tolist()
    conics = ad.value(ps.conic).tolist()
    opac = ad.value(ps.opacity).tolist()
    cols = ad.value(ps.color).tolist()
    bg = [float(v) for v in background]
    w, h = cam.resolution
    out = np.zeros((h, w, 3))
    for y in range(h):
        for x in range(w):
            px, py = x + 0.5, y + 0.5
            T = 1.0
            c = [0.0, 0.0, 0.0]
            for (mx, my), (a, b, cc), o, col in zip(means, conics, opac, cols):
                dx = px - mx
                dy = py - my
                power = a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy
                if power > SKIP_POWER:
                    continue
                alpha = min(o * float(exp(-0.5 * power)), 0.99)
                for ch in range(3):
                    c[ch] = c[ch] + col[ch] * alpha * T
                T = T * (1.0 - alpha)
                if early_exit and T < 1e-4:
                    break
            out[y, x] = [c[ch] + T * bg[ch] for ch in range(3)]
    return np.clip(out, 0.0, 1.0)


# -- metrics ------------------------------------------------------------------

@lru_cache(maxsize=32)
def _blur_matrix(n: int, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Banded matrix applying a normalized 1D Gaussian with zero padding."""
    half = size // 2
    k = np.exp(-((np.arange(size) - half) ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for off in range(-half, half + 1):
            j = i + off
            if 0 <= j < n:
                m[i, j] = k[off + half]
    return m


def _check_dims(a, b):
    if ad.value(a).shape != ad.value(b).shape:
        raise ValueError(f"image dimensions differ: {ad.value(a).shape} vs {ad.value(b).shape}")


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5,
    zero padding, unit data range)."""
    _check_dims(a, b)
    h, w = ad.value(a).shape[:2]
    gh, gw = _blur_matrix(h), _blur_matrix(w).T

    def blur(x):
        return gh @ ad.swapaxes(ad.swapaxes(x, 0, 2), 1, 2) @ gw  # (3, H, W)

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a * mu_a
    sbb = blur(b * b) - mu_b * mu_b
    sab = blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return ad.mean(num / den)


def l1(a, b):
    return ad.mean(ad.abs_(a - b))


def distortion(rendered, target):
    """Rendering loss ``0.8 * L1 + 0.2 * (1 - SSIM)``."""
    _check_dims(rendered, target)
    return (1.0 - SSIM_WEIGHT) * l1(rendered, target) + SSIM_WEIGHT * (1.0 - ssim(rendered, target))


def psnr(a, b) -> float:
    _check_dims(a, b)
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))

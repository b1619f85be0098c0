"""Quaternion and covariance helpers usable on arrays or tape tensors.

Quaternions are stored ``(w, x, y, z)`` along the last axis.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    norm = ad.sqrt(ad.sum_(q * q, axis=-1, keepdims=True))
    return q / norm


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b`` (rotate by ``b`` first, then ``a``)."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return ad.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rotmat(q):
    """Rotation matrices ``(..., 3, 3)`` from unit quaternions ``(..., 4)``."""
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        ad.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        ad.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        ad.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def covariance_from_params(log_scale, quat):
    """``R diag(exp(s))^2 R^T`` for log-scales ``(..., 3)`` and quaternions ``(..., 4)``.

    The quaternion is normalized here, so unnormalized parameters are fine.
    """
    rot = quat_to_rotmat(quat_normalize(quat))
    scaled = rot * ad.exp(2.0 * log_scale)[..., None, :]
    return scaled @ ad.swapaxes(rot, -1, -2)


def rotmat_to_quat(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single proper rotation matrix."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)

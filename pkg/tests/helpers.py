"""Small fixtures shared by several test modules."""

import numpy as np

from splatcodec import optimizer
from splatcodec.core import Camera, attach_coupled, init_anchors


def small_camera(size=16, focal=20.0):
    return Camera.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], focal, size, size)


def random_state(n=2, k=2, seed=0, spread=0.4):
    """A small untrained codec state with anchors near the origin."""
    rng = np.random.default_rng(seed)
    points = rng.uniform(-spread, spread, size=(n, 3))
    scene = attach_coupled(init_anchors(points, 1e-3, seed=seed), k)
    scene.cov_scale = np.full((n, 3), np.log(0.25))
    scene.ref_embedding = rng.normal(0.0, 1.5, size=scene.ref_embedding.shape)
    scene.res_embedding = rng.normal(0.0, 1.5, size=scene.res_embedding.shape)
    return optimizer.init_codec(scene, seed=seed)


def fd_instance(seed=0, size=16):
    """2 anchors, K = 2, 16x16 target, fixed quantization noise."""
    from splatcodec import entropy

    st = random_state(n=2, k=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    target = rng.uniform(size=(size, size, 3))
    noise = entropy.draw_noise(rng, 2, 2)
    return st, small_camera(size), target, noise


def _central(p, name, i, h, loss):
    vals = []
    for sign in (1.0, -1.0):
        q = dict(p)
        arr = p[name].copy()
        arr.flat[i] += sign * h
        q[name] = arr
        vals.append(loss(q))
    return (vals[0] - vals[1]) / (2 * h)


def _close(an, fd, rel_tol, abs_tol):
    if abs(fd) < 1e-3 and abs(an) < 1e-3:
        return abs(an - fd) <= abs_tol
    return abs(an - fd) <= rel_tol * max(abs(an), abs(fd))


def fd_check(st, cam, target, noise, lam=1e-3, h=1e-4, per_array=12, seed=0,
             rel_tol=1e-3, abs_tol=1e-6, fine_h=1e-6):
    """Compare tape gradients with central differences.

    Scene and quantizer parameters are checked entry by entry; network and
    table arrays on their ``per_array`` largest-gradient entries plus as many
    random ones. The loss is piecewise smooth (ReLU hidden units, piecewise
    linear hyperprior tables), so a stencil of width ``2h`` can straddle a
    kink. An entry that misses at ``h`` but matches at ``fine_h`` is reported
    as a straddle rather than a failure. Returns
    ``{group: (checked, failures, straddles)}``.
    """
    p = optimizer.state_params(st)
    _, grads = optimizer.value_and_grad(p, st.q, cam, target, lam, noise)

    def loss(q):
        return float(optimizer.loss_terms(q, st.q, cam, target, lam, noise).L)

    rng = np.random.default_rng(seed)
    out = {}
    for name, g in grads.items():
        flat = g.ravel()
        if name.startswith(("scene.", "q.")):
            idx = np.arange(flat.size)
        else:
            top = np.argsort(-np.abs(flat), kind="stable")[:per_array]
            idx = np.unique(np.concatenate([top, rng.choice(flat.size, min(per_array, flat.size),
                                                            replace=False)]))
        fails, kinks = [], []
        for i in idx:
            an = float(flat[i])
            fd = _central(p, name, i, h, loss)
            if _close(an, fd, rel_tol, abs_tol):
                continue
            fine = _central(p, name, i, fine_h, loss)
            (kinks if _close(an, fine, rel_tol, abs_tol) else fails).append(
                (name, int(i), an, float(fd), float(fine)))
        group = optimizer.param_group(name)
        checked, f, k = out.get(group, (0, [], []))
        out[group] = (checked + len(idx), f + fails, k + kinks)
    return out

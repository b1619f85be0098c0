"""Residual two-layer perceptrons shared by prediction and entropy models."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

HIDDEN = 32
PARAM_ORDER = ("w_in", "b_in", "w1", "b1", "w2", "b2", "w_out", "b_out")


def mlp_shapes(n_in: int, n_out: int, hidden: int = HIDDEN) -> dict[str, tuple[int, ...]]:
    return {
        "w_in": (n_in, hidden), "b_in": (hidden,),
        "w1": (hidden, hidden), "b1": (hidden,),
        "w2": (hidden, hidden), "b2": (hidden,),
        "w_out": (hidden, n_out), "b_out": (n_out,),
    }


def init_mlp(n_in, n_out, rng, out_scale=0.01, hidden=HIDDEN) -> dict[str, np.ndarray]:
    """He-uniform hidden layers; the output layer starts near zero."""
    params = {}
    for name, shape in mlp_shapes(n_in, n_out, hidden).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        elif name == "w_out":
            params[name] = rng.normal(0.0, out_scale, size=shape)
        else:
            bound = np.sqrt(6.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_mlp(n_in, n_out, hidden=HIDDEN) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in mlp_shapes(n_in, n_out, hidden).items()}


def mlp_forward(params, x):
    """``x (B, n_in) -> (B, n_out)``: in-projection, one residual block, out-projection."""
    h = x @ params["w_in"] + params["b_in"]
    r = ad.relu(h) @ params["w1"] + params["b1"]
    r = ad.relu(r) @ params["w2"] + params["b2"]
    h = h + r
    return ad.relu(h) @ params["w_out"] + params["b_out"]


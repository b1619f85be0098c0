"""Rate-constrained training: minimize ``lam * R + D`` with Adam.

All trainables live in one flat ``{name: array}`` map. Names are prefixed by
their owner (``scene.``, ``q.``, ``nets.<net>.``, ``models.<net>.``,
``fb.``), which is also how parameter groups are reported in errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bitstream, entropy, renderer
from .core import COV_DIM, Camera, Scene
from .entropy import FactorizedBottleneck, GaussianCondModel, QuantConfig
from .geometry import quat_normalize
from .locations import location_bits
from .prediction import PredictionNetworks, predict_gaussians

RATE_UNITS = ("symbol", "total")
SCENE_FIELDS = ("location", "cov_scale", "cov_rotation", "ref_embedding", "res_embedding")


@dataclass
class CodecState:
    scene: Scene
    nets: PredictionNetworks
    models: GaussianCondModel
    fb: FactorizedBottleneck
    q: QuantConfig


@dataclass
class TrainConfig:
    lam: float = 0.001
    steps: int = 2000
    lr_init: float = 1e-2        # embeddings, geometry, s_cov
    lr_final: float = 1e-4
    lr_net_init: float = 1e-3    # prediction and entropy networks
    lr_net_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    prune_interval: int = 500
    prune_threshold: float = 0.005
    use_noise: bool = True
    freeze_residual: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    rate_unit: str = "symbol"    # "symbol": lam weighs mean bits per coded symbol; "total": total bits

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not (self.lr_init >= self.lr_final > 0 and self.lr_net_init >= self.lr_net_final > 0):
            raise ValueError("learning rates must satisfy lr_init >= lr_final > 0")
        if self.rate_unit not in RATE_UNITS:
            raise ValueError(f"rate_unit must be one of {RATE_UNITS}")


def init_codec(scene: Scene, seed: int = 0, q: QuantConfig | None = None) -> CodecState:
    """Fresh networks plus a data-dependent start for the covariance model.

    The covariance model's output bias is set to the mean and spread of the
    initial covariance symbols; otherwise they sit far in the floored tail
    of the pmf where the rate has no gradient.
    """
    rng = np.random.default_rng(seed)
    q = q or QuantConfig()
    nets = PredictionNetworks.init(rng)
    models = GaussianCondModel.init(rng)
    sym = entropy.cov_params(scene.cov_scale, scene.cov_rotation) / q.s_cov
    if len(sym):
        spread = np.maximum(sym.std(axis=0), 1.0)
        models["E_cov"]["b_out"] = np.concatenate([sym.mean(axis=0), np.log(np.expm1(spread))])
    return CodecState(scene.copy(), nets, models, FactorizedBottleneck.init(), q)


# -- flat parameter maps ------------------------------------------------------

def state_params(state: CodecState) -> dict[str, np.ndarray]:
    p = {f"scene.{k}": np.array(getattr(state.scene, k), dtype=np.float64) for k in SCENE_FIELDS}
    p["q.log_s_cov"] = np.array(math.log(state.q.s_cov))
    for name, net in state.nets.params.items():
        for k, v in net.items():
            p[f"nets.{name}.{k}"] = np.array(v, dtype=np.float64)
    for name, net in state.models.nets.items():
        for k, v in net.items():
            p[f"models.{name}.{k}"] = np.array(v, dtype=np.float64)
    p["fb.logits_f"] = np.array(state.fb.logits_f, dtype=np.float64)
    p["fb.logits_g"] = np.array(state.fb.logits_g, dtype=np.float64)
    return p


def _views(p, q: QuantConfig):
    """Group a flat map (arrays or tensors) back into model objects."""
    nets: dict = {}
    models: dict = {}
    for key, v in p.items():
        owner, *rest = key.split(".")
        if owner == "nets":
            nets.setdefault(rest[0], {})[rest[1]] = v
        elif owner == "models":
            models.setdefault(rest[0], {})[rest[1]] = v
    return (PredictionNetworks(nets), GaussianCondModel(models),
            FactorizedBottleneck(p["fb.logits_f"], p["fb.logits_g"]))


def params_to_state(p, q: QuantConfig) -> CodecState:
    p = {k: ad.value(v).copy() for k, v in p.items()}
    nets, models, fb = _views(p, q)
    scene = Scene(*(p[f"scene.{k}"] for k in SCENE_FIELDS))
    s_cov = float(math.exp(float(p["q.log_s_cov"])))
    return CodecState(scene, nets, models, fb, QuantConfig(q.s_f, q.s_g, s_cov))


def param_group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2])


# -- loss ---------------------------------------------------------------------

@dataclass
class LossTerms:
    L: object
    D: object
    R: object
    opacity: np.ndarray   # per coupled primitive, anchor-major


def loss_terms(p, q: QuantConfig, cam: Camera, target, lam: float, noise=None,
               background=(0.0, 0.0, 0.0), loc_bits: float | None = None,
               rate_unit: str = "total") -> LossTerms:
    """``L = lam * R + D`` on one view from a flat parameter map.

    ``noise`` (see :func:`entropy.draw_noise`) selects the training proxy;
    ``None`` hard-quantizes every coded stream. ``R`` is in bits and includes
    the (non-differentiable) exact location-section size. With
    ``rate_unit="symbol"`` the objective weighs ``R`` divided by the number of
    coded symbols (three per anchor location plus every stream element).
    """
    nets, models, fb = _views(p, q)
    s_cov = ad.exp(p["q.log_s_cov"])
    cov = ad.concatenate([p["scene.cov_scale"], p["scene.cov_rotation"]], axis=-1)
    st = entropy.model_streams(p["scene.ref_embedding"], cov, p["scene.res_embedding"],
                               models, fb, q.s_f, s_cov, q.s_g, noise)
    if loc_bits is None:
        loc_bits = location_bits(ad.value(p["scene.location"]))
    R = loc_bits
    count = 3 * len(ad.value(p["scene.location"]))
    for s in (st.eta_f, st.f, st.cov, st.eta_g, st.g):
        R = R + ad.sum_(s.bits)
        count += ad.value(s.bits).size
    rate = R if rate_unit == "total" else R * (1.0 / max(count, 1))
    cov_hat = st.cov_hat
    means, covs, opacity, color = predict_gaussians(
        p["scene.location"], cov_hat[:, :3], cov_hat[:, 3:COV_DIM], st.f_hat, st.g_hat,
        cam.center, nets)
    image = renderer.render_arrays(means, covs, opacity, color, cam, background)
    D = renderer.distortion(image, target)
    return LossTerms(lam * rate + D, D, R, ad.value(opacity))


def loss(state: CodecState, cameras, targets, lam: float, use_noise: bool = False, rng=None,
         background=(0.0, 0.0, 0.0), rate_unit: str = "total"):
    """Batch loss ``(L, D, R)`` as floats; ``D`` is averaged over the views
    and ``R`` is always total bits."""
    cameras, targets = list(cameras), list(targets)
    if not cameras or len(cameras) != len(targets):
        raise ValueError("batch must be non-empty with one target per camera")
    p = state_params(state)
    noise = None
    if use_noise:
        rng = rng if rng is not None else np.random.default_rng(0)
        noise = entropy.draw_noise(rng, state.scene.n_anchors, state.scene.K)
    loc_bits = location_bits(state.scene.location)
    ds = []
    for cam, tgt in zip(cameras, targets):
        t = loss_terms(p, state.q, cam, tgt, lam, noise, background, loc_bits, rate_unit)
        ds.append(float(t.D))
    D = math.fsum(ds) / len(ds)
    R = float(t.R)
    return float(t.L) - float(t.D) + D, D, R


def backward(tape: ad.GradientTape, target, variables: dict) -> dict[str, np.ndarray]:
    """Gradients of ``target`` for every recorded variable; non-finite ones
    raise ``FloatingPointError`` naming the parameter group."""
    names = list(variables)
    grads = tape.gradient(target, [variables[k] for k in names])
    out = {}
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {param_group(name)}")
        out[name] = g
    return out


def value_and_grad(p: dict, q: QuantConfig, cam, target, lam, noise=None,
                   background=(0.0, 0.0, 0.0), loc_bits=None, trainable=None, rate_unit="total"):
    with ad.GradientTape() as tape:
        tp = {k: (tape.variable(v, name=k) if trainable is None or k in trainable else v)
              for k, v in p.items()}
        terms = loss_terms(tp, q, cam, target, lam, noise, background, loc_bits, rate_unit)
        grads = backward(tape, terms.L, {k: v for k, v in tp.items() if isinstance(v, ad.Tensor)})
    return terms, grads


# -- optimizer ----------------------------------------------------------------

def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 1:
        return lr_init
    t = min(step, total - 1) / (total - 1)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(p, grads, st: AdamState, lrs: dict, beta1, beta2, eps):
    st.t += 1
    c1 = 1.0 - beta1 ** st.t
    c2 = 1.0 - beta2 ** st.t
    for k, g in grads.items():
        m = st.m.get(k)
        if m is None:
            m = st.m[k] = np.zeros_like(g)
            st.v[k] = np.zeros_like(g)
        v = st.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p[k] = p[k] - lrs[k] * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainResult:
    state: CodecState
    trace: list            # (step, L, D, R) per step
    adam: AdamState


def _is_fast(name: str) -> bool:
    return name.startswith("scene.") or name.startswith("q.")


def _prune(p, adam: AdamState, stats, threshold):
    keep = np.flatnonzero(stats >= threshold)
    if len(keep) == 0:
        raise ValueError("scene emptied")
    if len(keep) == len(stats):
        return p, stats
    for k in SCENE_FIELDS:
        name = f"scene.{k}"
        p[name] = p[name][keep]
        if name in adam.m:
            adam.m[name] = adam.m[name][keep]
            adam.v[name] = adam.v[name][keep]
    return p, stats[keep]


def train(state: CodecState, cameras, targets, config: TrainConfig, callback=None) -> TrainResult:
    """Run ``config.steps`` Adam updates, one training view per step in
    round-robin order. Deterministic for a fixed seed."""
    cameras, targets = list(cameras), [np.asarray(t, dtype=np.float64) for t in targets]
    if not cameras or len(cameras) != len(targets):
        raise ValueError("need at least one training view with a target image")
    p = state_params(state)
    q = state.q
    adam = AdamState()
    trace = []
    if config.steps == 0:
        return TrainResult(params_to_state(p, q), trace, adam)

    rng = np.random.default_rng(config.seed)
    trainable = set(p)
    if config.freeze_residual:
        p["scene.res_embedding"] = np.zeros_like(p["scene.res_embedding"])
        trainable.discard("scene.res_embedding")
    stats = np.zeros(len(p["scene.location"]))
    for step in range(config.steps):
        cam = cameras[step % len(cameras)]
        tgt = targets[step % len(cameras)]
        n, k = p["scene.res_embedding"].shape[:2]
        noise = entropy.draw_noise(rng, n, k) if config.use_noise else None
        if noise is not None and config.freeze_residual:
            # removed residuals decode to exactly zero, so they get no proxy noise either
            noise["g"] = np.zeros_like(noise["g"])
        try:
            terms, grads = value_and_grad(p, q, cam, tgt, config.lam, noise, config.background,
                                          trainable=trainable, rate_unit=config.rate_unit)
        except FloatingPointError as exc:
            raise FloatingPointError(f"training diverged at step {step}: {exc}") from exc
        L = float(terms.L)
        if not math.isfinite(L):
            raise FloatingPointError(f"training diverged at step {step}: non-finite loss")
        trace.append((step, L, float(terms.D), float(terms.R)))
        stats = np.maximum(stats, terms.opacity.reshape(n, k).max(axis=1))

        fast = cosine_lr(step, config.steps, config.lr_init, config.lr_final)
        slow = cosine_lr(step, config.steps, config.lr_net_init, config.lr_net_final)
        lrs = {name: fast if _is_fast(name) else slow for name in grads}
        adam_step(p, grads, adam, lrs, config.beta1, config.beta2, config.eps)
        p["scene.cov_rotation"] = quat_normalize(p["scene.cov_rotation"])

        done = step + 1
        if config.prune_interval and done % config.prune_interval == 0 and done < config.steps:
            p, stats = _prune(p, adam, stats, config.prune_threshold)
            stats = np.zeros_like(stats)
        if callback is not None:
            callback(step, terms)
    return TrainResult(params_to_state(p, q), trace, adam)


# -- evaluation ---------------------------------------------------------------

def render_state(scene: Scene, nets: PredictionNetworks, cam: Camera, background=(0.0, 0.0, 0.0)):
    means, covs, opacity, color = predict_gaussians(
        scene.location, scene.cov_scale, scene.cov_rotation, scene.ref_embedding,
        scene.res_embedding, cam.center, nets)
    return ad.value(renderer.render_arrays(means, covs, opacity, color, cam, background))


def evaluate(data: bytes, cameras, targets, background=(0.0, 0.0, 0.0)) -> dict:
    """Decode a bitstream, render every given view, and score it."""
    dec = bitstream.read_scene(data)
    views = []
    for i, (cam, tgt) in enumerate(zip(cameras, targets)):
        img = render_state(dec.scene, dec.nets, cam, background)
        views.append({"view": i, "psnr": renderer.psnr(img, tgt),
                      "ssim": float(renderer.ssim(img, np.asarray(tgt, dtype=np.float64)))})
    n = max(len(views), 1)
    return {
        "views": views,
        "mean_psnr": math.fsum(v["psnr"] for v in views) / n,
        "mean_ssim": math.fsum(v["ssim"] for v in views) / n,
        "size_bytes": len(data),
        "size_mb": len(data) / 1e6,
    }


def encode_state(state: CodecState, lam: float, location_step=None) -> bitstream.EncodedScene:
    return bitstream.encode_scene(state.scene, state.nets, state.models, state.fb, state.q,
                                  lam, location_step)

"""Quantization, the uniform-noise training proxy, and the probability models
that assign bit costs to every coded tensor.

Stream dependencies (decoder order): hyperprior ``eta_f`` -> reference
embedding ``f`` -> anchor covariance, and ``eta_g`` + decoded ``f`` ->
residual embedding ``g``. Conditioning always uses *dequantized* values so the
decoder can reproduce every probability.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .core import COV_DIM, REF_DIM, RES_DIM, AnchorPrimitive, CoupledPrimitive, Scene
from .mlp import init_mlp, mlp_forward

ETA_F_DIM = 8
ETA_G_DIM = 4
SUPPORT = 64  # factorized models cover integers in [-SUPPORT, SUPPORT]
PMF_FLOOR = 2.0 ** -16
RHO_FLOOR = 1e-4
INT32_MAX = 2 ** 31 - 1

MODEL_IO = {
    "E_f": (ETA_F_DIM, 2 * REF_DIM),
    "E_cov": (REF_DIM, 2 * COV_DIM),
    "E_g": (REF_DIM + ETA_G_DIM, 2 * RES_DIM),
    "H_f": (REF_DIM, ETA_F_DIM),
    "H_g": (RES_DIM, ETA_G_DIM),
}
# Networks the decoder needs; hyper-encoders stay on the encoder side.
DECODER_MODELS = ("E_f", "E_cov", "E_g")


@dataclass
class QuantConfig:
    s_f: float = 1.0
    s_g: float = 1.0
    s_cov: float = 0.01

    def __post_init__(self):
        if min(self.s_f, self.s_g, self.s_cov) <= 0:
            raise ValueError("quantization steps must be positive")


@dataclass
class FactorizedBottleneck:
    """Per-channel categorical models over ``[-SUPPORT, SUPPORT]``."""

    logits_f: np.ndarray
    logits_g: np.ndarray

    @classmethod
    def init(cls, width: float = 2.0) -> "FactorizedBottleneck":
        v = np.arange(-SUPPORT, SUPPORT + 1, dtype=np.float64)
        base = -0.5 * (v / width) ** 2
        return cls(np.tile(base, (ETA_F_DIM, 1)), np.tile(base, (ETA_G_DIM, 1)))

    def pmf(self, which: str) -> np.ndarray:
        """Floored per-channel probability tables ``(C, 2*SUPPORT+1)``."""
        return np.maximum(ad.value(softmax(getattr(self, f"logits_{which}"))), PMF_FLOOR)


@dataclass
class GaussianCondModel:
    """Parameter networks for the conditional Gaussians plus hyper-encoders."""

    nets: dict[str, dict[str, np.ndarray]]

    @classmethod
    def init(cls, rng) -> "GaussianCondModel":
        nets = {name: init_mlp(i, o, rng) for name, (i, o) in MODEL_IO.items()}
        for name in ("H_f", "H_g"):
            # hyper-encoders need enough gain to produce non-trivial symbols
            nets[name]["w_out"] = rng.normal(0.0, 0.3, size=nets[name]["w_out"].shape)
        return cls(nets)

    def __getitem__(self, name):
        return self.nets[name]


@dataclass
class RateReport:
    bits_f: float
    bits_sigma: float
    bits_g: float
    bits_hyper: float
    bits_locations: float
    total: float
    per_anchor_avg: float
    per_coupled_avg: float
    # split of bits_hyper, kept for per-primitive accounting
    bits_hyper_f: float = field(default=0.0, repr=False)
    bits_hyper_g: float = field(default=0.0, repr=False)

    def to_dict(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("bits_hyper_f")
        d.pop("bits_hyper_g")
        d["bits_Σ"] = d.pop("bits_sigma")
        order = ("bits_f", "bits_Σ", "bits_g", "bits_hyper", "bits_locations", "total",
                 "per_anchor_avg", "per_coupled_avg")
        return {k: float(d[k]) for k in order}


# -- scalar operations --------------------------------------------------------

def quantize(x, step):
    """Round-half-to-even of ``x / step``; works on scalars and arrays."""
    if np.any(np.asarray(step) <= 0):
        raise ValueError("step must be positive")
    y = np.asarray(x, dtype=np.float64) / step
    if np.any(~np.isfinite(y)) or np.any(np.abs(y) > INT32_MAX):
        raise OverflowError("quantization overflow")
    q = np.rint(y).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(v, step):
    out = np.asarray(v, dtype=np.float64) * step
    return float(out) if out.ndim == 0 else out


def add_noise(x, step, u):
    """Training surrogate for :func:`quantize`: ``x / step + u`` with ``u`` in [-0.5, 0.5)."""
    if np.any(np.asarray(ad.value(u)) < -0.5) or np.any(np.asarray(ad.value(u)) >= 0.5):
        raise ValueError("noise must lie in [-0.5, 0.5)")
    return x / step + u


def discrete_gaussian_mass(v, tau, rho):
    """Unfloored mass of ``N(tau, rho)`` on ``[v - 0.5, v + 0.5]``.

    Evaluated on the lower tail via ``|v - tau|`` for accuracy far from the mean.
    """
    if np.any(ad.value(rho) <= 0):
        raise ValueError("rho must be positive")
    d = ad.abs_(v - tau)
    return ad.ndtr((0.5 - d) / rho) - ad.ndtr((-0.5 - d) / rho)


def discrete_gaussian_pmf(v, tau, rho):
    """:func:`discrete_gaussian_mass` floored at 2^-16 (the coder's resolution)."""
    return ad.maximum(discrete_gaussian_mass(v, tau, rho), PMF_FLOOR)


def rate_bits(p):
    if np.any(ad.value(p) <= 0):
        raise ValueError("probability must be positive")
    return ad.log(p) * (-1.0 / math.log(2.0))


def softmax(logits):
    shift = np.max(ad.value(logits), axis=-1, keepdims=True)
    e = ad.exp(logits - shift)
    return e / ad.sum_(e, axis=-1, keepdims=True)


def factorized_pmf(eta, logits):
    """Probability of hyperprior values ``eta (B, C)`` under per-channel tables.

    Integer inputs index the table directly; continuous (noisy) inputs
    interpolate linearly between neighbouring integers so the rate stays
    differentiable. Continuous inputs are clamped to the support.
    """
    ev = ad.value(eta)
    if not np.all(np.isfinite(ev)):
        raise FloatingPointError("non-finite hyperprior value")
    probs = softmax(logits)
    c = np.arange(ev.shape[-1])
    if np.all(ev == np.rint(ev)):
        if np.any(np.abs(ev) > SUPPORT):
            raise ValueError("support exceeded")
        p = probs[c, ev.astype(np.int64) + SUPPORT]
        return ad.maximum(p, PMF_FLOOR)
    eta = ad.clip(eta, -SUPPORT, SUPPORT)
    lo = np.minimum(np.floor(ad.value(eta)), SUPPORT - 1).astype(np.int64)
    t = eta - lo
    p = (1.0 - t) * probs[c, lo + SUPPORT] + t * probs[c, lo + SUPPORT + 1]
    return ad.maximum(p, PMF_FLOOR)


def gaussian_params(raw, n: int):
    """Split a parameter-network output into mean and positive scale."""
    return raw[..., :n], ad.softplus(raw[..., n:]) + RHO_FLOOR


# -- stream modeling ----------------------------------------------------------

@dataclass
class Stream:
    symbols: object      # hard: int array; noisy: continuous tensor/array
    tau: object = None
    rho: object = None
    bits: object = None  # per-symbol bits, same shape as symbols


@dataclass
class SceneStreams:
    eta_f: Stream
    f: Stream
    cov: Stream
    eta_g: Stream
    g: Stream
    f_hat: object        # dequantized reference embeddings (N, 32)
    cov_hat: object      # dequantized covariance scalars (N, 7)
    g_hat: object        # dequantized residual embeddings (N, K, 8)


def cov_params(cov_scale, cov_rotation):
    return ad.concatenate([cov_scale, cov_rotation], axis=-1)


def _hard(x, step):
    return quantize(ad.value(x), ad.value(step)).astype(np.float64)


def f_params(models: GaussianCondModel, eta_f):
    """Mean and scale of the reference-embedding Gaussians given ``eta_f``."""
    return gaussian_params(mlp_forward(models["E_f"], eta_f), REF_DIM)


def cov_model_params(models: GaussianCondModel, f_hat):
    return gaussian_params(mlp_forward(models["E_cov"], f_hat), COV_DIM)


def g_params(models: GaussianCondModel, f_hat, eta_g, k: int):
    """Parameters for residual embeddings, rows anchor-major ``(N*K, 8)``."""
    rep = np.repeat(np.arange(ad.value(f_hat).shape[0]), k)
    return gaussian_params(mlp_forward(models["E_g"], ad.concatenate([f_hat[rep], eta_g], axis=-1)),
                           RES_DIM)


def model_streams(ref, cov, res, models: GaussianCondModel, fb: FactorizedBottleneck,
                  s_f, s_cov, s_g, noise=None) -> SceneStreams:
    """Symbols, distribution parameters and per-symbol bits of every stream.

    ``ref (N, 32)``, ``cov (N, 7)``, ``res (N, K, 8)`` may be tensors. With
    ``noise`` (a dict of uniform draws keyed by stream) the differentiable
    proxy is used; otherwise values are hard-quantized.
    """
    n, k = ad.value(res).shape[:2]

    def symbols(x, step, key):
        if noise is None:
            return _hard(x, step)
        return x / step + noise[key]

    eta_f = symbols(mlp_forward(models["H_f"], ref), 1.0, "eta_f")
    f_sym = symbols(ref, s_f, "f")
    f_hat = f_sym * s_f
    tau_f, rho_f = f_params(models, eta_f)

    cov_sym = symbols(cov, s_cov, "cov")
    cov_hat = cov_sym * s_cov
    tau_c, rho_c = cov_model_params(models, f_hat)

    g_flat = ad.reshape(res, (n * k, RES_DIM))
    eta_g = symbols(mlp_forward(models["H_g"], g_flat), 1.0, "eta_g")
    g_sym = symbols(g_flat, s_g, "g")
    g_hat = ad.reshape(g_sym * s_g, (n, k, RES_DIM))
    tau_g, rho_g = g_params(models, f_hat, eta_g, k)

    def gauss_bits(v, tau, rho):
        return rate_bits(discrete_gaussian_pmf(v, tau, rho))

    return SceneStreams(
        eta_f=Stream(eta_f, bits=rate_bits(factorized_pmf(eta_f, fb.logits_f))),
        f=Stream(f_sym, tau_f, rho_f, gauss_bits(f_sym, tau_f, rho_f)),
        cov=Stream(cov_sym, tau_c, rho_c, gauss_bits(cov_sym, tau_c, rho_c)),
        eta_g=Stream(eta_g, bits=rate_bits(factorized_pmf(eta_g, fb.logits_g))),
        g=Stream(g_sym, tau_g, rho_g, gauss_bits(g_sym, tau_g, rho_g)),
        f_hat=f_hat, cov_hat=cov_hat, g_hat=g_hat,
    )


def draw_noise(rng, n: int, k: int) -> dict[str, np.ndarray]:
    """Independent uniform noise in [-0.5, 0.5) for every stream."""
    def u(*shape):
        return rng.random(shape) - 0.5
    return {"eta_f": u(n, ETA_F_DIM), "f": u(n, REF_DIM), "cov": u(n, COV_DIM),
            "eta_g": u(n * k, ETA_G_DIM), "g": u(n * k, RES_DIM)}


def scene_streams(scene: Scene, models, fb, q: QuantConfig) -> SceneStreams:
    return model_streams(scene.ref_embedding, cov_params(scene.cov_scale, scene.cov_rotation),
                         scene.res_embedding, models, fb, q.s_f, q.s_cov, q.s_g)


def total_bits(x) -> float:
    return math.fsum(np.asarray(ad.value(x), dtype=np.float64).ravel())


def rate_report(streams: SceneStreams, n_anchors: int, n_coupled: int,
                location_bits: float) -> RateReport:
    bits_f = total_bits(streams.f.bits)
    bits_sigma = total_bits(streams.cov.bits)
    bits_g = total_bits(streams.g.bits)
    hyper_f = total_bits(streams.eta_f.bits)
    hyper_g = total_bits(streams.eta_g.bits)
    total = math.fsum([bits_f, bits_sigma, bits_g, hyper_f, hyper_g, location_bits])
    anchor_bits = math.fsum([bits_f, bits_sigma, hyper_f, location_bits])
    coupled_bits = math.fsum([bits_g, hyper_g])
    return RateReport(
        bits_f=bits_f, bits_sigma=bits_sigma, bits_g=bits_g,
        bits_hyper=hyper_f + hyper_g, bits_locations=float(location_bits), total=total,
        per_anchor_avg=anchor_bits / n_anchors if n_anchors else 0.0,
        per_coupled_avg=coupled_bits / n_coupled if n_coupled else 0.0,
        bits_hyper_f=hyper_f, bits_hyper_g=hyper_g,
    )


def scene_rate(scene: Scene, models, fb, q: QuantConfig, location_bits: float | None = None,
               location_step: float | None = None) -> RateReport:
    """Hard-quantized bit budget of a whole scene.

    Per-symbol costs are summed with :func:`math.fsum`, so the totals do not
    depend on evaluation order.
    """
    if location_bits is None:
        from .locations import location_bits as _loc_bits
        location_bits = _loc_bits(scene.location, location_step)
    streams = scene_streams(scene, models, fb, q)
    return rate_report(streams, scene.n_anchors, scene.n_coupled, location_bits)


# -- per-primitive views ------------------------------------------------------

def model_anchor(anchor: AnchorPrimitive, models, fb, q: QuantConfig):
    """Symbols, probabilities and bits for one anchor's ``eta_f``, ``f`` and covariance.

    Returns ``(symbols, probabilities, bits_f, bits_sigma, bits_hyper_f)`` where
    ``symbols`` and ``probabilities`` are dicts keyed by stream name.
    """
    scene = Scene.from_primitives([anchor], [], K=0)
    s = scene_streams(scene, models, fb, q)
    syms = {"eta_f": s.eta_f.symbols[0].astype(np.int64), "f": s.f.symbols[0].astype(np.int64),
            "cov": s.cov.symbols[0].astype(np.int64)}
    probs = {name: 2.0 ** -ad.value(getattr(s, name).bits)[0] for name in syms}
    return (syms, probs, total_bits(s.f.bits), total_bits(s.cov.bits), total_bits(s.eta_f.bits))


def model_coupled(coupled: CoupledPrimitive, f_anchor, models, fb, q: QuantConfig):
    """Symbols, probabilities and bits for one coupled primitive.

    ``f_anchor`` is the anchor's quantized reference embedding (symbols).
    Returns ``(symbols, probabilities, bits_g, bits_hyper_g)``.
    """
    f_hat = np.asarray(f_anchor, dtype=np.float64)[None] * q.s_f
    g = coupled.res_embedding[None]
    eta_g = _hard(mlp_forward(models["H_g"], g), 1.0)
    g_sym = _hard(g, q.s_g)
    tau, rho = gaussian_params(mlp_forward(models["E_g"], np.concatenate([f_hat, eta_g], -1)), RES_DIM)
    p_g = discrete_gaussian_pmf(g_sym, tau, rho)
    p_eta = factorized_pmf(eta_g, fb.logits_g)
    syms = {"eta_g": eta_g[0].astype(np.int64), "g": g_sym[0].astype(np.int64)}
    probs = {"eta_g": p_eta[0], "g": p_g[0]}
    return syms, probs, total_bits(rate_bits(p_g)), total_bits(rate_bits(p_eta))

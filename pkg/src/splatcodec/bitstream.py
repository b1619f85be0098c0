"""The ``.cgs`` container: header, network weights and six coded sections.

Layout (little-endian)::

    header | weights (f32) | locations | eta_f | f | cov | eta_g | g

The header records every section length and a CRC-32 of everything after
it. Before coding, all real-valued side information (weights, steps, grid
origin) is rounded to f32 and anchors are put in Morton order; the encoder
then derives probabilities from exactly the values the decoder will see.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import coder, entropy, locations
from .core import COV_DIM, REF_DIM, RES_DIM, Scene
from .entropy import FactorizedBottleneck, GaussianCondModel, QuantConfig
from .geometry import IDENTITY_QUAT
from .mlp import PARAM_ORDER, mlp_shapes
from .prediction import NET_IO, PredictionNetworks

MAGIC = b"CGS1"
VERSION = 1
SECTIONS = ("locations", "eta_f", "f", "cov", "eta_g", "g")
_HEADER = struct.Struct("<4sBIBff3ffIff6II")
HEADER_SIZE = _HEADER.size


class BitstreamError(ValueError):
    pass


@dataclass(frozen=True)
class BitstreamHeader:
    anchor_count: int
    K: int
    lam: float
    s_cov: float
    origin: tuple[float, float, float]
    location_step: float
    weight_bytes: int
    s_f: float
    s_g: float
    section_bytes: tuple[int, ...]
    crc: int = 0
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.anchor_count, self.K, self.lam, self.s_cov,
                            *self.origin, self.location_step, self.weight_bytes, self.s_f, self.s_g,
                            *self.section_bytes, self.crc)

    @classmethod
    def unpack(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < HEADER_SIZE:
            raise BitstreamError("truncated header")
        f = _HEADER.unpack_from(data)
        if f[0] != MAGIC:
            raise BitstreamError("bad magic")
        if f[1] != VERSION:
            raise BitstreamError(f"unsupported version {f[1]}")
        return cls(anchor_count=f[2], K=f[3], lam=f[4], s_cov=f[5], origin=tuple(f[6:9]),
                   location_step=f[9], weight_bytes=f[10], s_f=f[11], s_g=f[12],
                   section_bytes=tuple(f[13:19]), crc=f[19], version=f[1])


# -- weight blob --------------------------------------------------------------

def _weight_layout():
    """``(owner, net, key, shape)`` in serialization order."""
    out = []
    for name, (i, o) in NET_IO.items():
        shapes = mlp_shapes(i, o)
        out += [("nets", name, k, shapes[k]) for k in PARAM_ORDER]
    for name in entropy.DECODER_MODELS:
        i, o = entropy.MODEL_IO[name]
        shapes = mlp_shapes(i, o)
        out += [("models", name, k, shapes[k]) for k in PARAM_ORDER]
    width = 2 * entropy.SUPPORT + 1
    out += [("fb", "logits_f", None, (entropy.ETA_F_DIM, width)),
            ("fb", "logits_g", None, (entropy.ETA_G_DIM, width))]
    return out


def pack_weights(nets: PredictionNetworks, models: GaussianCondModel, fb: FactorizedBottleneck) -> bytes:
    parts = []
    for owner, name, key, shape in _weight_layout():
        if owner == "nets":
            arr = nets[name][key]
        elif owner == "models":
            arr = models[name][key]
        else:
            arr = getattr(fb, name)
        arr = np.asarray(arr)
        if arr.shape != shape:
            raise ValueError(f"{name}.{key} has shape {arr.shape}, expected {shape}")
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def unpack_weights(blob: bytes):
    view = np.frombuffer(blob, dtype="<f4")
    nets: dict = {n: {} for n in NET_IO}
    models: dict = {n: {} for n in entropy.DECODER_MODELS}
    fb = {}
    pos = 0
    for owner, name, key, shape in _weight_layout():
        size = int(np.prod(shape))
        if pos + size > len(view):
            raise BitstreamError("section length mismatch: weights")
        arr = view[pos:pos + size].astype(np.float64).reshape(shape)
        pos += size
        if owner == "nets":
            nets[name][key] = arr
        elif owner == "models":
            models[name][key] = arr
        else:
            fb[name] = arr
    if pos != len(view) or len(blob) % 4:
        raise BitstreamError("section length mismatch: weights")
    return PredictionNetworks(nets), GaussianCondModel(models), FactorizedBottleneck(**fb)


def weight_bytes() -> int:
    return 4 * sum(int(np.prod(s)) for *_, s in _weight_layout())


def round_f32(nets, models, fb, q: QuantConfig):
    """Copies of all side information as the decoder will read it."""
    nets32, models32, fb32 = unpack_weights(pack_weights(nets, models, fb))
    # hyper-encoders never leave the encoder, but round them too for symmetry
    for name in ("H_f", "H_g"):
        models32.nets[name] = {k: np.float32(v).astype(np.float64)
                               for k, v in models[name].items()}
    q32 = QuantConfig(*(float(np.float32(v)) for v in (q.s_f, q.s_g, q.s_cov)))
    return nets32, models32, fb32, q32


# -- scene <-> symbols --------------------------------------------------------

def dequantize_scene(loc, f_sym, cov_sym, g_sym, q: QuantConfig) -> Scene:
    """Scene from decoded symbols; shared by encoder and decoder."""
    n = len(loc)
    cov = np.asarray(cov_sym, dtype=np.float64).reshape(n, COV_DIM) * q.s_cov
    rot = cov[:, 3:]
    norm = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norm > 0, rot / np.where(norm > 0, norm, 1.0), IDENTITY_QUAT)
    ref = np.asarray(f_sym, dtype=np.float64).reshape(n, REF_DIM) * q.s_f
    res = np.asarray(g_sym, dtype=np.float64).reshape(n, -1, RES_DIM) * q.s_g
    return Scene(np.asarray(loc, dtype=np.float64), cov[:, :3].copy(), rot, ref, res)


@dataclass
class EncodedScene:
    data: bytes
    header: BitstreamHeader
    scene: Scene                 # hard-quantized scene in coded (Morton) order
    nets: PredictionNetworks
    models: GaussianCondModel
    fb: FactorizedBottleneck
    q: QuantConfig
    estimated_bits: dict         # model estimate per coded section
    section_bytes: dict


def encode_scene(scene: Scene, nets, models, fb, q: QuantConfig, lam: float = 0.0,
                 location_step: float | None = None) -> EncodedScene:
    if scene.n_anchors == 0:
        raise ValueError("cannot encode an empty scene")
    if not 1 <= scene.K <= 255:
        raise ValueError("K must be in 1..255")
    nets32, models32, fb32, q32 = round_f32(nets, models, fb, q)

    step = locations.default_step(scene.location) if location_step is None \
        else float(np.float32(location_step))
    origin = locations.default_origin(scene.location)
    grid = locations.quantize_grid(scene.location, origin, step)
    order = locations.morton_order(grid)
    grid = grid[order]
    ordered = scene.take(order)

    s = entropy.scene_streams(ordered, models32, fb32, q32)
    eta_f = s.eta_f.symbols.astype(np.int64)
    f_sym = s.f.symbols.astype(np.int64)
    cov_sym = s.cov.symbols.astype(np.int64)
    eta_g = s.eta_g.symbols.astype(np.int64)
    g_sym = s.g.symbols.astype(np.int64)

    payload = {
        "locations": locations.encode_grid(grid),
        "eta_f": coder.encode_factorized(eta_f, fb32.pmf("f")),
        "f": coder.encode_gaussian(f_sym, s.f.tau, s.f.rho),
        "cov": coder.encode_gaussian(cov_sym, s.cov.tau, s.cov.rho),
        "eta_g": coder.encode_factorized(eta_g, fb32.pmf("g")),
        "g": coder.encode_gaussian(g_sym, s.g.tau, s.g.rho),
    }
    blob = pack_weights(nets32, models32, fb32)
    body = blob + b"".join(payload[k] for k in SECTIONS)
    header = BitstreamHeader(
        anchor_count=scene.n_anchors, K=scene.K, lam=float(np.float32(lam)), s_cov=q32.s_cov,
        origin=tuple(float(v) for v in origin), location_step=step, weight_bytes=len(blob),
        s_f=q32.s_f, s_g=q32.s_g, section_bytes=tuple(len(payload[k]) for k in SECTIONS),
        crc=zlib.crc32(body))
    loc = locations.dequantize_grid(grid, origin, step)
    qscene = dequantize_scene(loc, f_sym, cov_sym, g_sym, q32)
    est = {"locations": 8.0 * len(payload["locations"])}
    for name in ("eta_f", "f", "cov", "eta_g", "g"):
        est[name] = entropy.total_bits(getattr(s, name).bits)
    return EncodedScene(header.pack() + body, header, qscene, nets32, models32, fb32, q32, est,
                        {k: len(v) for k, v in payload.items()})


def write_scene(scene: Scene, nets, models, fb, q: QuantConfig, lam: float = 0.0,
                location_step: float | None = None) -> bytes:
    return encode_scene(scene, nets, models, fb, q, lam, location_step).data


@dataclass
class DecodedScene:
    scene: Scene
    nets: PredictionNetworks
    models: GaussianCondModel
    fb: FactorizedBottleneck
    q: QuantConfig
    header: BitstreamHeader
    symbols: dict
    estimated_bits: dict   # model estimate per section, from decoded symbols


def split_sections(data: bytes):
    """Header plus ``{name: bytes}`` for the weight blob and coded sections."""
    header = BitstreamHeader.unpack(data)
    expected = HEADER_SIZE + header.weight_bytes + sum(header.section_bytes)
    if len(data) != expected:
        raise BitstreamError(f"section length mismatch: file has {len(data)} bytes, "
                             f"header describes {expected}")
    body = data[HEADER_SIZE:]
    if zlib.crc32(body) != header.crc:
        raise BitstreamError("checksum mismatch")
    parts = {"weights": body[:header.weight_bytes]}
    pos = header.weight_bytes
    for name, size in zip(SECTIONS, header.section_bytes):
        parts[name] = body[pos:pos + size]
        pos += size
    return header, parts


def _gaussian_bits(sym, tau, rho) -> float:
    p = entropy.discrete_gaussian_pmf(sym.astype(np.float64), tau, rho)
    return entropy.total_bits(entropy.rate_bits(p))


def _factorized_bits(sym, logits) -> float:
    return entropy.total_bits(entropy.rate_bits(entropy.factorized_pmf(sym.astype(np.float64), logits)))


def _exact(name, used, size):
    if used != size:
        raise BitstreamError(f"section length mismatch: {name}")


def read_scene(data: bytes) -> DecodedScene:
    header, parts = split_sections(bytes(data))
    nets, models, fb = unpack_weights(parts["weights"])
    q = QuantConfig(header.s_f, header.s_g, header.s_cov)
    n, k = header.anchor_count, header.K
    if n == 0 or k == 0:
        raise BitstreamError("empty scene")

    grid, used = locations.decode_grid(parts["locations"], n)
    _exact("locations", used, len(parts["locations"]))
    eta_f, used = coder.decode_factorized(parts["eta_f"], fb.pmf("f"), n)
    _exact("eta_f", used, len(parts["eta_f"]))
    est = {"locations": 8.0 * len(parts["locations"]),
           "eta_f": _factorized_bits(eta_f, fb.logits_f)}
    tau, rho = entropy.f_params(models, eta_f.astype(np.float64))
    f_sym, used = coder.decode_gaussian(parts["f"], tau, rho)
    _exact("f", used, len(parts["f"]))
    f_sym = f_sym.reshape(n, REF_DIM)
    est["f"] = _gaussian_bits(f_sym, tau, rho)
    f_hat = f_sym.astype(np.float64) * q.s_f
    tau, rho = entropy.cov_model_params(models, f_hat)
    cov_sym, used = coder.decode_gaussian(parts["cov"], tau, rho)
    _exact("cov", used, len(parts["cov"]))
    cov_sym = cov_sym.reshape(n, COV_DIM)
    est["cov"] = _gaussian_bits(cov_sym, tau, rho)
    eta_g, used = coder.decode_factorized(parts["eta_g"], fb.pmf("g"), n * k)
    _exact("eta_g", used, len(parts["eta_g"]))
    est["eta_g"] = _factorized_bits(eta_g, fb.logits_g)
    tau, rho = entropy.g_params(models, f_hat, eta_g.astype(np.float64), k)
    g_sym, used = coder.decode_gaussian(parts["g"], tau, rho)
    _exact("g", used, len(parts["g"]))
    g_sym = g_sym.reshape(n * k, RES_DIM)
    est["g"] = _gaussian_bits(g_sym, tau, rho)

    loc = locations.dequantize_grid(grid, header.origin, header.location_step)
    scene = dequantize_scene(loc, f_sym, cov_sym, g_sym, q)
    symbols = {"grid": grid, "eta_f": eta_f, "f": f_sym, "cov": cov_sym, "eta_g": eta_g, "g": g_sym}
    return DecodedScene(scene, nets, models, fb, q, header, symbols, est)

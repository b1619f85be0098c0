"""Command-line entry point: ``splatcodec <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bitstream, data, entropy, optimizer
from .core import DEFAULT_K, attach_coupled, init_anchors
from .prediction import affine_outputs, fuse_features, predict_gaussians, warp_geometry

DEFAULT_VOXEL_FRACTION = 1.0 / 16.0


def _background(values):
    return tuple(float(v) for v in values)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def default_voxel(points) -> float:
    """1/16 of the point cloud's bounding-box diagonal."""
    points = np.asarray(points, dtype=np.float64)
    diag = float(np.linalg.norm(points.max(0) - points.min(0))) if len(points) else 0.0
    return diag * DEFAULT_VOXEL_FRACTION if diag > 0 else 1.0


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    ds = data.load_dataset(args.scene)
    voxel = args.voxel or default_voxel(ds.points)
    scene = attach_coupled(init_anchors(ds.points, voxel, seed=args.seed), args.k)
    state = optimizer.init_codec(scene, seed=args.seed)
    config = optimizer.TrainConfig(lam=args.lam, steps=args.steps, seed=args.seed,
                                   background=_background(args.background),
                                   freeze_residual=args.no_residual)
    cams, images = ds.train
    result = optimizer.train(state, cams, images, config)
    enc = optimizer.encode_state(result.state, args.lam)
    out = Path(args.out)
    out.write_bytes(enc.data)

    trace_path = Path(args.trace) if args.trace else out.with_name(out.name + ".trace.csv")
    with open(trace_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L", "D_bits", "R_bits"])
        for step, L, D, R in result.trace:
            w.writerow([step, repr(L), repr(D), repr(R)])

    # optimizer sidecar: encoder-only networks and Adam moments
    side = {f"models.{n}.{k}": v for n in ("H_f", "H_g") for k, v in result.state.models[n].items()}
    side.update({f"adam.m.{k}": v for k, v in result.adam.m.items()})
    side.update({f"adam.v.{k}": v for k, v in result.adam.v.items()})
    side["adam.t"] = np.array(result.adam.t)
    with open(out.with_name(out.name + ".state.npz"), "wb") as fh:
        np.savez(fh, **side)
    print(f"wrote {out} ({len(enc.data)} bytes, {enc.scene.n_anchors} anchors)")
    return 0


def _decoded_gaussians(dec, cam_center):
    s = dec.scene
    return predict_gaussians(s.location, s.cov_scale, s.cov_rotation, s.ref_embedding,
                             s.res_embedding, cam_center, dec.nets)


def _canonical_center(scene):
    lo, hi = scene.location.min(0), scene.location.max(0)
    mid = 0.5 * (lo + hi)
    return mid + np.array([0.0, 0.0, -2.0 * max(float(np.linalg.norm(hi - lo)), 1e-3)])


def cmd_decode(args) -> int:
    dec = bitstream.read_scene(Path(args.inp).read_bytes())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = dec.scene
    n, k = s.n_anchors, s.K
    rep = np.repeat(np.arange(n), k)
    h = fuse_features(s.ref_embedding[rep], s.res_embedding.reshape(n * k, -1))
    t, log_s, q = affine_outputs(h, dec.nets)
    loc, scale, rot = warp_geometry(s.location[rep], s.cov_scale[rep], s.cov_rotation[rep], t, log_s, q)
    _, _, opacity, color = _decoded_gaussians(dec, _canonical_center(s))
    cols = {"x": loc[:, 0], "y": loc[:, 1], "z": loc[:, 2]}
    cols.update({f"scale_{i}": scale[:, i] for i in range(3)})
    cols.update({f"rot_{i}": rot[:, i] for i in range(4)})
    cols["opacity"] = opacity
    cols.update({c: color[:, i] for i, c in enumerate(("red", "green", "blue"))})
    data.write_ply(out / "gaussians.ply", cols)
    if args.scene:
        ds = data.load_dataset(args.scene)
        for i, cam in enumerate(ds.cameras):
            img = optimizer.render_state(s, dec.nets, cam, _background(args.background))
            data.save_png(out / f"view_{i:04d}.png", img)
    print(f"decoded {n} anchors, {n * k} coupled primitives into {out}")
    return 0


def cmd_render(args) -> int:
    dec = bitstream.read_scene(Path(args.inp).read_bytes())
    cameras, _ = data.load_cameras(Path(args.scene) / "cameras.json")
    if not 0 <= args.camera < len(cameras):
        raise IndexError(f"camera index {args.camera} out of range (0..{len(cameras) - 1})")
    img = optimizer.render_state(dec.scene, dec.nets, cameras[args.camera], _background(args.background))
    data.save_png(args.out, img)
    return 0


def cmd_eval(args) -> int:
    raw = Path(args.inp).read_bytes()
    ds = data.load_dataset(args.scene)
    cams, images = ds.test
    metrics = optimizer.evaluate(raw, cams, images, _background(args.background))
    for v, idx in zip(metrics["views"], ds.test_idx):
        v["view"] = int(idx)
    _write_json(args.json, metrics)
    print(f"mean PSNR {metrics['mean_psnr']:.3f} dB, SSIM {metrics['mean_ssim']:.4f}, "
          f"{metrics['size_bytes']} bytes")
    return 0


def build_report(raw: bytes) -> dict:
    """Coded bit budget per stream (sums to the file size) plus model estimates."""
    dec = bitstream.read_scene(raw)
    sizes = dict(zip(bitstream.SECTIONS, dec.header.section_bytes))
    bits = {k: 8.0 * v for k, v in sizes.items()}
    n, k = dec.header.anchor_count, dec.header.K
    coded = entropy.RateReport(
        bits_f=bits["f"], bits_sigma=bits["cov"], bits_g=bits["g"],
        bits_hyper=bits["eta_f"] + bits["eta_g"], bits_locations=bits["locations"],
        total=math.fsum(bits.values()),
        per_anchor_avg=(bits["f"] + bits["cov"] + bits["eta_f"] + bits["locations"]) / n,
        per_coupled_avg=(bits["g"] + bits["eta_g"]) / (n * k))
    est = dec.estimated_bits
    estimated = entropy.RateReport(
        bits_f=est["f"], bits_sigma=est["cov"], bits_g=est["g"],
        bits_hyper=est["eta_f"] + est["eta_g"], bits_locations=est["locations"],
        total=math.fsum(est.values()),
        per_anchor_avg=(est["f"] + est["cov"] + est["eta_f"] + est["locations"]) / n,
        per_coupled_avg=(est["g"] + est["eta_g"]) / (n * k))
    report = coded.to_dict()
    report.update({
        "header_bytes": bitstream.HEADER_SIZE,
        "weight_bytes": dec.header.weight_bytes,
        "section_bytes": sizes,
        "file_bytes": len(raw),
        "file_bits": 8 * len(raw),
        "anchor_count": n,
        "coupled_count": n * k,
        "lambda": dec.header.lam,
        "estimated": estimated.to_dict(),
    })
    return report


def cmd_report(args) -> int:
    report = build_report(Path(args.inp).read_bytes())
    _write_json(args.json, report)
    print(f"{report['file_bytes']} bytes: " + ", ".join(
        f"{k} {v}" for k, v in report["section_bytes"].items()))
    return 0


def cmd_toy(args) -> int:
    text = args.spec
    if Path(text).is_file():
        text = Path(text).read_text()
    spec = data.ToySceneSpec.from_json(text)
    gaussians, ds = data.make_toy_scene(spec)
    data.save_dataset(ds, args.out)
    g_cov = np.array([g.covariance for g in gaussians])
    data.write_ply(Path(args.out) / "ground_truth.ply", {
        "x": [g.location[0] for g in gaussians], "y": [g.location[1] for g in gaussians],
        "z": [g.location[2] for g in gaussians],
        **{f"cov_{i}{j}": g_cov[:, i, j] for i in range(3) for j in range(i, 3)},
        "opacity": [g.opacity for g in gaussians],
        **{c: [g.color[i] for g in gaussians] for i, c in enumerate(("red", "green", "blue"))},
    })
    print(f"wrote toy scene with {len(ds.cameras)} views to {args.out}")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatcodec", description="Compress Gaussian-splat scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_background(sp):
        sp.add_argument("--background", nargs=3, type=float, default=(0.0, 0.0, 0.0),
                        metavar=("R", "G", "B"), help="background colour in [0,1] (default black)")

    for name in ("train", "encode"):
        sp = sub.add_parser(name, help="train a scene and write its bitstream")
        sp.add_argument("--scene", required=True, help="scene directory")
        sp.add_argument("--lambda", dest="lam", type=float, required=True, help="rate weight")
        sp.add_argument("--steps", type=int, required=True)
        sp.add_argument("--out", required=True, help="output .cgs file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--k", type=int, default=DEFAULT_K, help="coupled primitives per anchor")
        sp.add_argument("--voxel", type=float, default=None,
                        help="anchor voxel size (default: 1/16 of the point bbox diagonal)")
        sp.add_argument("--trace", default=None, help="loss trace CSV (default: OUT.trace.csv)")
        sp.add_argument("--no-residual", action="store_true",
                        help="keep residual embeddings at zero (ablation)")
        add_background(sp)
        sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="decode a bitstream to a PLY (+ per-view renders)")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--scene", default=None, help="scene directory supplying cameras for renders")
    add_background(sp)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("render", help="render one camera of a scene directory")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--scene", required=True, help="scene directory supplying cameras.json")
    sp.add_argument("--camera", type=int, required=True)
    sp.add_argument("--out", required=True, help="output PNG")
    add_background(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM on the held-out views")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--scene", required=True)
    sp.add_argument("--json", required=True)
    add_background(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="bit budget of a bitstream as JSON")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--json", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("toy", help="generate the synthetic toy scene")
    sp.add_argument("--spec", required=True, help="ToySceneSpec as a JSON file or string")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"splatcodec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

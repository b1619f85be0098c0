"""End-to-end acceptance checks, one test per criterion.

The conftest hook prints one PASS/FAIL line per criterion at the end of the run.
"""

import json
import time

import numpy as np
import pytest

from helpers import fd_check, fd_instance, random_state
from splatcodec import bitstream, cli, coder, data, entropy, optimizer, renderer
from splatcodec.core import Camera, RenderableGaussian, attach_coupled, init_anchors
from splatcodec.geometry import covariance_from_params, quat_normalize

LAMBDAS = (0.001, 0.005, 0.01)
STEPS = 2000

pytestmark = pytest.mark.slow


# -- shared training runs -----------------------------------------------------

def _train(toy, lam, freeze_residual=False):
    _, ds = toy
    scene = attach_coupled(init_anchors(ds.points, cli.default_voxel(ds.points)), 10)
    state = optimizer.init_codec(scene, seed=0)
    cams, tgts = ds.train
    t0 = time.perf_counter()
    res = optimizer.train(state, cams, tgts,
                          optimizer.TrainConfig(lam=lam, steps=STEPS, freeze_residual=freeze_residual))
    seconds = time.perf_counter() - t0
    enc = optimizer.encode_state(res.state, lam)
    test_cams, test_tgts = ds.test
    metrics = optimizer.evaluate(enc.data, test_cams, test_tgts)
    return {"result": res, "enc": enc, "metrics": metrics, "seconds": seconds}


@pytest.fixture(scope="session")
def runs(toy):
    out = {lam: _train(toy, lam) for lam in LAMBDAS}
    out["ablation"] = _train(toy, LAMBDAS[0], freeze_residual=True)
    for key, r in out.items():
        print(f"\n[run {key}] psnr {r['metrics']['mean_psnr']:.3f} dB, "
              f"{len(r['enc'].data)} bytes, {r['enc'].scene.n_anchors} anchors, {r['seconds']:.0f} s")
    return out


# -- 1 ------------------------------------------------------------------------

@pytest.mark.criterion(1, "lossless codec roundtrip")
def test_c1_lossless_roundtrip(runs, toy):
    _, ds = toy
    for lam in LAMBDAS:
        enc = runs[lam]["enc"]
        t0 = time.perf_counter()
        again = optimizer.encode_state(runs[lam]["result"].state, lam)
        dec = bitstream.read_scene(enc.data)
        elapsed = time.perf_counter() - t0
        assert again.data == enc.data
        assert dec.header == enc.header
        q = dec.q
        assert np.array_equal(dec.symbols["f"], np.rint(enc.scene.ref_embedding / q.s_f))
        assert np.array_equal(dec.symbols["g"].reshape(enc.scene.res_embedding.shape),
                              np.rint(enc.scene.res_embedding / q.s_g))
        for name in ("location", "cov_scale", "cov_rotation", "ref_embedding", "res_embedding"):
            assert np.array_equal(getattr(dec.scene, name), getattr(enc.scene, name)), name
        assert bitstream.pack_weights(dec.nets, dec.models, dec.fb) == \
            bitstream.pack_weights(enc.nets, enc.models, enc.fb)
        for cam in ds.cameras:
            assert np.array_equal(optimizer.render_state(dec.scene, dec.nets, cam),
                                  optimizer.render_state(enc.scene, enc.nets, cam))
        assert elapsed < 60


# -- 2 ------------------------------------------------------------------------

def _check_sections(enc, label):
    s = enc.scene
    counts = {"locations": 3 * s.n_anchors, "eta_f": s.n_anchors * entropy.ETA_F_DIM,
              "f": s.ref_embedding.size, "cov": s.n_anchors * 7,
              "eta_g": s.n_coupled * entropy.ETA_G_DIM, "g": s.res_embedding.size}
    checked = 0
    for name, n in counts.items():
        if n < 10_000:
            continue
        actual, est = 8 * enc.section_bytes[name], enc.estimated_bits[name]
        assert est - 64 <= actual <= est * 1.01 + 64, (label, name, actual, est)
        checked += 1
    return checked


@pytest.mark.criterion(2, "rate-model fidelity")
def test_c2_rate_fidelity(runs):
    checked = 0
    for seed in range(3):
        st = random_state(n=400, k=10, seed=seed, spread=1.0)
        checked += _check_sections(optimizer.encode_state(st, 0.001), f"seed {seed}")
    for lam in LAMBDAS:
        checked += _check_sections(runs[lam]["enc"], f"lambda {lam}")
    assert checked >= 12


# -- 3 ------------------------------------------------------------------------

@pytest.mark.criterion(3, "entropy coder correctness")
def test_c3_entropy_coder():
    rng = np.random.default_rng(0)
    n = 1_000_000
    uniform = np.full(256, 1 / 256)
    sym = rng.integers(0, 256, size=n)
    data_a = coder.rc_encode(sym, uniform)
    assert coder.rc_decode(data_a, lambda i, d: uniform, n) == sym.tolist()
    shannon_bytes = n * 8 / 8
    assert abs(len(data_a) - shannon_bytes) <= 0.001 * shannon_bytes

    tables = [rng.dirichlet(np.full(16, 0.5)) for _ in range(16)]
    cum = [np.cumsum(t) for t in tables]
    u = rng.random(n)
    msg = np.empty(n, dtype=np.int64)
    prev = 0
    for i in range(n):
        prev = msg[i] = min(int(np.searchsorted(cum[prev], u[i], side="right")), 15)
    pmfs = [tables[0]] + [tables[s] for s in msg[:-1]]
    data_b = coder.rc_encode(msg, pmfs)
    out = coder.rc_decode(data_b, lambda i, d: tables[d[-1]] if d else tables[0], n)
    assert out == msg.tolist()


# -- 4 ------------------------------------------------------------------------

@pytest.mark.criterion(4, "gradient verification")
def test_c4_gradients(capsys):
    t0 = time.perf_counter()
    st, cam, target, noise = fd_instance(seed=0, size=16)
    assert (st.scene.n_anchors, st.scene.K, cam.width, cam.height) == (2, 2, 16, 16)
    report = fd_check(st, cam, target, noise, h=1e-4, per_array=48)
    elapsed = time.perf_counter() - t0
    total = sum(c for c, _, _ in report.values())
    straddles = sum(len(k) for _, _, k in report.values())
    with capsys.disabled():
        print(f"\n[gradients] {len(report)} groups, {total} entries, {straddles} kink straddles "
              f"at h=1e-4 (matched at h=1e-6), {elapsed:.0f} s")
    assert len(report) == 18
    for group, (checked, fails, _) in report.items():
        assert checked > 0 and not fails, (group, fails[:3])
    assert elapsed < 300


# -- 5 ------------------------------------------------------------------------

def windowed_means(trace, width=100):
    L = np.array([t[1] for t in trace])
    return L.reshape(-1, width).mean(axis=1)


@pytest.mark.criterion(5, "toy-scene RD training")
def test_c5_toy_training(runs, toy):
    gs, ds = toy
    assert len(gs) == 64 and len(ds.cameras) == 8 and ds.images[0].shape == (64, 64, 3)
    r = runs[0.001]
    assert len(r["result"].trace) == STEPS
    assert r["metrics"]["mean_psnr"] >= 30.0
    w = windowed_means(r["result"].trace)
    assert np.all(np.diff(w) <= 0), np.round(w, 6)
    assert r["seconds"] < 30 * 60


# -- 6 ------------------------------------------------------------------------

@pytest.mark.criterion(6, "RD monotonicity across lambda")
def test_c6_rd_monotonicity(runs):
    sizes = [len(runs[lam]["enc"].data) for lam in LAMBDAS]
    psnrs = [runs[lam]["metrics"]["mean_psnr"] for lam in LAMBDAS]
    assert all(a >= b for a, b in zip(sizes, sizes[1:])), sizes
    assert all(a >= b for a, b in zip(psnrs, psnrs[1:])), psnrs


# -- 7 ------------------------------------------------------------------------

@pytest.mark.criterion(7, "hybrid-structure bit asymmetry")
def test_c7_bit_asymmetry(runs):
    for lam in LAMBDAS:
        enc = runs[lam]["enc"]
        est = entropy.scene_rate(enc.scene, enc.models, enc.fb, enc.q)
        coded = cli.build_report(enc.data)
        assert est.per_coupled_avg < est.per_anchor_avg, (lam, est.to_dict())
        assert coded["per_coupled_avg"] < coded["per_anchor_avg"], lam


# -- 8 ------------------------------------------------------------------------

@pytest.mark.criterion(8, "residual-embedding ablation")
def test_c8_residual_ablation(runs):
    ablated = runs["ablation"]
    assert np.all(ablated["enc"].scene.res_embedding == 0)
    assert ablated["metrics"]["mean_psnr"] < runs[0.001]["metrics"]["mean_psnr"]


# -- 9 ------------------------------------------------------------------------

def _random_scene(rng):
    n = int(rng.integers(1, 40))
    out = []
    for _ in range(n):
        cov = covariance_from_params(rng.uniform(-3.0, -0.8, size=3), quat_normalize(rng.normal(size=4)))
        out.append(RenderableGaussian(rng.normal(0, 0.5, size=3), cov, rng.uniform(0.05, 1.0),
                                      rng.uniform(size=3)))
    return out


@pytest.mark.criterion(9, "renderer oracle equivalence")
def test_c9_renderer_oracle():
    rng = np.random.default_rng(9)
    for _ in range(50):
        size = int(rng.integers(8, 40))
        eye = rng.normal(size=3)
        eye = eye / np.linalg.norm(eye) * rng.uniform(2.5, 4.0)
        cam = Camera.look_at(eye, np.zeros(3), [0, -1, 0], rng.uniform(15, 45), size, size)
        gs = _random_scene(rng)
        bg = tuple(rng.uniform(size=3))
        assert np.array_equal(renderer.render(gs, cam, bg, early_exit=False),
                              renderer.render_reference(gs, cam, bg))

    cam = Camera(np.eye(3), np.zeros(3), (30.0, 30.0), (10, 10), (20, 20))
    for _ in range(10):
        base = _random_scene(rng)[:8]
        gs = [RenderableGaussian([g.location[0], g.location[1], 2.0], g.covariance, g.opacity, g.color)
              for g in base]
        gs += [RenderableGaussian(gs[0].location, gs[0].covariance, 0.5, rng.uniform(size=3))]
        ref = renderer.render(gs, cam)
        for _ in range(5):
            perm = rng.permutation(len(gs))
            assert np.array_equal(renderer.render([gs[i] for i in perm], cam), ref)


# -- 10 -----------------------------------------------------------------------

@pytest.mark.criterion(10, "determinism")
def test_c10_determinism(tmp_path, toy):
    scene = tmp_path / "toy"
    data.save_dataset(toy[1], scene)
    outputs = []
    for run in ("a", "b"):
        cgs, js = tmp_path / f"{run}.cgs", tmp_path / f"{run}.json"
        assert cli.main(["train", "--scene", str(scene), "--lambda", "0.001", "--steps", "200",
                         "--seed", "3", "--out", str(cgs)]) == 0
        assert cli.main(["eval", "--in", str(cgs), "--scene", str(scene), "--json", str(js)]) == 0
        outputs.append((cgs.read_bytes(), js.read_bytes(),
                        (tmp_path / f"{run}.cgs.trace.csv").read_bytes()))
    assert outputs[0] == outputs[1]
    assert json.loads(outputs[0][1])["size_bytes"] == len(outputs[0][0])

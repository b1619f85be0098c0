import math

import numpy as np
import pytest

from helpers import random_state, small_camera
from splatcodec import bitstream, entropy, optimizer, renderer
from splatcodec.optimizer import TrainConfig


def batch(st, n=2, seed=0):
    rng = np.random.default_rng(seed)
    cams = [small_camera()] * n
    return cams, [rng.uniform(size=(16, 16, 3)) for _ in range(n)]


def test_lambda_zero_gives_distortion():
    st = random_state()
    cams, tgts = batch(st)
    L, D, R = optimizer.loss(st, cams, tgts, 0.0)
    assert L == D and R > 0


def test_lagrangian_arithmetic():
    # the recorded L is lam * R + D exactly
    st = random_state(seed=2)
    cams, tgts = batch(st, 1)
    L, D, R = optimizer.loss(st, cams, tgts, 0.001)
    assert L == pytest.approx(0.001 * R + D, rel=1e-12)
    assert 0.001 * 1000 + 0.5 == pytest.approx(1.5)


def test_loss_recomposes_from_rate_report_and_render():
    st = random_state(n=3, k=2, seed=4)
    cams, tgts = batch(st, 2, seed=1)
    lam = 0.005
    L, D, R = optimizer.loss(st, cams, tgts, lam)

    report = entropy.scene_rate(st.scene, st.models, st.fb, st.q)
    s = entropy.scene_streams(st.scene, st.models, st.fb, st.q)
    deq = bitstream.dequantize_scene(st.scene.location, s.f.symbols, s.cov.symbols,
                                     s.g.symbols, st.q)
    ds = [float(renderer.distortion(optimizer.render_state(deq, st.nets, c), t))
          for c, t in zip(cams, tgts)]
    assert R == pytest.approx(report.total, rel=1e-9)
    assert D == pytest.approx(math.fsum(ds) / len(ds), abs=1e-12)
    assert L == pytest.approx(lam * report.total + D, rel=1e-9)


def test_loss_requires_batch():
    st = random_state()
    with pytest.raises(ValueError):
        optimizer.loss(st, [], [], 0.0)


def test_symbol_rate_unit_divides_by_symbol_count():
    st = random_state(n=2, k=2, seed=5)
    p = optimizer.state_params(st)
    cam, tgt = small_camera(), np.zeros((16, 16, 3))
    total = optimizer.loss_terms(p, st.q, cam, tgt, 1.0, rate_unit="total")
    per = optimizer.loss_terms(p, st.q, cam, tgt, 1.0, rate_unit="symbol")
    count = 2 * 3 + 2 * (entropy.ETA_F_DIM + 32 + 7) + 4 * (entropy.ETA_G_DIM + 8)
    assert float(per.L) - float(per.D) == pytest.approx(float(total.R) / count, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-4, lr_final=1e-3)
    with pytest.raises(ValueError):
        TrainConfig(rate_unit="nats")


def test_cosine_schedule_endpoints():
    assert optimizer.cosine_lr(0, 100, 1e-2, 1e-4) == 1e-2
    assert optimizer.cosine_lr(99, 100, 1e-2, 1e-4) == pytest.approx(1e-4)
    mid = optimizer.cosine_lr(50, 101, 1e-2, 1e-4)
    assert mid == pytest.approx(0.5 * (1e-2 + 1e-4))


def test_adam_first_step_moves_by_lr():
    p = {"x": np.array([1.0, -2.0])}
    st = optimizer.AdamState()
    optimizer.adam_step(p, {"x": np.array([0.3, -5.0])}, st, {"x": 0.1}, 0.9, 0.999, 1e-8)
    assert np.allclose(p["x"], [0.9, -1.9])


def test_zero_step_train_returns_inputs():
    st = random_state(seed=6)
    cams, tgts = batch(st, 1)
    res = optimizer.train(st, cams, tgts, TrainConfig(steps=0))
    assert res.trace == []
    for name, v in optimizer.state_params(st).items():
        assert np.array_equal(optimizer.state_params(res.state)[name], v)


def test_train_is_deterministic_and_lowers_loss(small_toy):
    from splatcodec.core import attach_coupled, init_anchors
    _, ds = small_toy
    scene = attach_coupled(init_anchors(ds.points, 0.3), 2)
    cams, tgts = ds.train
    cfg = TrainConfig(steps=30, lam=0.001)
    a = optimizer.train(optimizer.init_codec(scene, 0), cams, tgts, cfg)
    b = optimizer.train(optimizer.init_codec(scene, 0), cams, tgts, cfg)
    assert a.trace == b.trace
    first = np.mean([t[1] for t in a.trace[:6]])
    last = np.mean([t[1] for t in a.trace[-6:]])
    assert last < first


def test_freeze_residual_keeps_zeros(small_toy):
    from splatcodec.core import attach_coupled, init_anchors
    _, ds = small_toy
    scene = attach_coupled(init_anchors(ds.points, 0.3), 2)
    scene.res_embedding = np.ones_like(scene.res_embedding)
    cams, tgts = ds.train
    res = optimizer.train(optimizer.init_codec(scene, 0), cams, tgts,
                          TrainConfig(steps=5, freeze_residual=True))
    assert np.all(res.state.scene.res_embedding == 0)


def test_freeze_residual_trains_without_g_noise(small_toy):
    from splatcodec import entropy
    from splatcodec.core import attach_coupled, init_anchors
    _, ds = small_toy
    scene = attach_coupled(init_anchors(ds.points, 0.3), 2)
    st = optimizer.init_codec(scene, 0)
    cams, tgts = ds.train
    res = optimizer.train(st, cams[:1], tgts[:1], TrainConfig(steps=1, freeze_residual=True))
    noise = entropy.draw_noise(np.random.default_rng(0), scene.n_anchors, scene.K)
    noise["g"][:] = 0
    terms = optimizer.loss_terms(optimizer.state_params(st), st.q, cams[0], tgts[0], 0.001, noise,
                                 rate_unit="symbol")
    assert res.trace[0][1] == float(terms.L)

def test_divergence_reports_step():
    st = random_state(seed=7)
    cams, tgts = batch(st, 1)
    cfg = TrainConfig(steps=3, lr_init=1e300, lr_final=1e299, lr_net_init=1e300, lr_net_final=1e299)
    with pytest.raises(FloatingPointError, match="step"), np.errstate(all="ignore"):
        optimizer.train(st, cams, tgts, cfg)


def test_pruning_drops_transparent_anchors(small_toy):
    from splatcodec.core import attach_coupled, init_anchors
    _, ds = small_toy
    scene = attach_coupled(init_anchors(ds.points, 0.3), 2)
    st = optimizer.init_codec(scene, 0)
    st.nets["opacity"]["b_out"] = np.array([-30.0])
    cams, tgts = ds.train
    with pytest.raises(ValueError, match="emptied"):
        optimizer.train(st, cams, tgts, TrainConfig(steps=4, prune_interval=2, lr_net_init=1e-9,
                                                    lr_net_final=1e-10))


def test_evaluate_of_own_bitstream(small_toy):
    from splatcodec.core import attach_coupled, init_anchors
    _, ds = small_toy
    scene = attach_coupled(init_anchors(ds.points, 0.3), 2)
    enc = optimizer.encode_state(optimizer.init_codec(scene, 0), 0.001)
    cams = ds.cameras[:2]
    renders = [optimizer.render_state(enc.scene, enc.nets, c) for c in cams]
    m = optimizer.evaluate(enc.data, cams, renders)
    assert [v["psnr"] for v in m["views"]] == [100.0, 100.0]
    assert m["size_bytes"] == len(enc.data)

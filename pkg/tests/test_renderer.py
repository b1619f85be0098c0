import numpy as np
import pytest

import oracles
from helpers import small_camera
from splatcodec import renderer
from splatcodec.core import Camera, RenderableGaussian
from splatcodec.geometry import covariance_from_params, quat_normalize


def random_gaussians(rng, n, spread=0.6, scale=(-2.5, -1.2)):
    out = []
    for _ in range(n):
        cov = covariance_from_params(rng.uniform(*scale, size=3), quat_normalize(rng.normal(size=4)))
        out.append(RenderableGaussian(rng.normal(0, spread, size=3), cov, rng.uniform(0.2, 1.0),
                                      rng.uniform(0, 1, size=3)))
    return out


# -- projection ---------------------------------------------------------------

def test_projection_closed_form():
    cam = Camera(np.eye(3), np.zeros(3), (50.0, 50.0), (8, 8), (16, 16))
    sigma = 0.05
    s = renderer.project(RenderableGaussian([0, 0, 1.0], np.eye(3) * sigma ** 2, 1.0, np.ones(3)), cam)
    expected = (50 * sigma) ** 2 * np.eye(2) + renderer.LOW_PASS * np.eye(2)
    assert np.allclose(s.cov2d, expected)
    assert np.allclose(s.mean2d, [8, 8]) and s.depth == 1.0


def test_behind_camera_is_culled():
    cam = Camera(np.eye(3), np.zeros(3), (50.0, 50.0), (8, 8), (16, 16))
    assert renderer.project(RenderableGaussian([0, 0, -1.0], np.eye(3) * 0.01, 1.0, np.ones(3)), cam) is None


def test_rigid_translation_invariance():
    rng = np.random.default_rng(0)
    g = random_gaussians(rng, 1)[0]
    cam = small_camera()
    shift = np.array([0.3, -0.7, 1.1])
    cam2 = Camera(cam.rotation, cam.translation - cam.rotation @ shift, cam.focal,
                  cam.principal_point, cam.resolution)
    g2 = RenderableGaussian(g.location + shift, g.covariance, g.opacity, g.color)
    a, b = renderer.project(g, cam), renderer.project(g2, cam2)
    assert np.allclose(a.mean2d, b.mean2d) and np.allclose(a.cov2d, b.cov2d)


# -- render -------------------------------------------------------------------

def test_empty_scene_is_background():
    img = renderer.render([], small_camera(), (0.2, 0.4, 0.6))
    assert np.allclose(img, [0.2, 0.4, 0.6])


def test_single_term_compositing():
    cam = Camera(np.eye(3), np.zeros(3), (50.0, 50.0), (8.5, 8.5), (16, 16))
    g = RenderableGaussian([0, 0, 1.0], np.eye(3) * 1e-4, 0.99, [1.0, 0.0, 0.0])
    img = renderer.render([g], cam)
    assert np.allclose(img[8, 8], [0.99, 0.0, 0.0])


def test_tiled_equals_brute_force_reference():
    rng = np.random.default_rng(1)
    cam = small_camera(20, 25.0)
    for _ in range(5):
        gs = random_gaussians(rng, 12)
        assert np.array_equal(renderer.render(gs, cam, early_exit=False),
                              renderer.render_reference(gs, cam))


def test_early_exit_reference_agrees():
    rng = np.random.default_rng(2)
    cam = small_camera(16, 25.0)
    gs = random_gaussians(rng, 30, spread=0.2, scale=(-1.5, -1.0))
    for g in gs:
        object.__setattr__(g, "opacity", 0.99)
    assert np.array_equal(renderer.render(gs, cam, early_exit=True),
                          renderer.render_reference(gs, cam, early_exit=True))


def test_render_is_order_invariant_with_tied_depths():
    rng = np.random.default_rng(3)
    cam = Camera(np.eye(3), np.zeros(3), (30.0, 30.0), (8, 8), (16, 16))
    gs = [RenderableGaussian([x, y, 2.0], np.eye(3) * 0.02, 0.7, rng.uniform(size=3))
          for x, y in rng.normal(0, 0.1, size=(6, 2))]
    gs += [RenderableGaussian(gs[0].location, gs[0].covariance, 0.4, rng.uniform(size=3))]
    base = renderer.render(gs, cam)
    for _ in range(5):
        perm = rng.permutation(len(gs))
        assert np.array_equal(renderer.render([gs[i] for i in perm], cam), base)


def test_render_output_is_clipped():
    cam = Camera(np.eye(3), np.zeros(3), (50.0, 50.0), (8, 8), (16, 16))
    g = RenderableGaussian([0, 0, 1.0], np.eye(3) * 0.01, 0.9, [1.0, 1.0, 1.0])
    img = renderer.render([g], cam, background=(1.0, 1.0, 1.0))
    assert img.max() <= 1.0 and img.min() >= 0.0


# -- metrics ------------------------------------------------------------------

def test_distortion_identical_is_zero():
    img = np.random.default_rng(4).uniform(size=(8, 8, 3))
    assert renderer.distortion(img, img) == pytest.approx(0.0, abs=1e-12)


def test_distortion_constant_shift():
    tgt = np.random.default_rng(5).uniform(0.1, 0.8, size=(12, 12, 3))
    out = tgt + 0.1
    d = renderer.distortion(out, tgt)
    ssim = oracles.ssim(out.tolist(), tgt.tolist())
    assert float(renderer.l1(out, tgt)) == pytest.approx(0.1)
    assert d == pytest.approx(0.8 * 0.1 + 0.2 * (1 - ssim), abs=1e-9)


def test_psnr_ssim_identity_and_cap():
    img = np.random.default_rng(6).uniform(size=(8, 8, 3))
    assert renderer.psnr(img, img) == 100.0
    assert float(renderer.ssim(img, img)) == pytest.approx(1.0)


def test_psnr_one_level():
    a = np.zeros((4, 4, 3))
    assert renderer.psnr(a, a + 1 / 255) == pytest.approx(48.13, abs=0.01)


def test_metrics_match_scalar_oracles():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(size=(9, 13, 3)), rng.uniform(size=(9, 13, 3))
    assert float(renderer.ssim(a, b)) == pytest.approx(oracles.ssim(a.tolist(), b.tolist()), abs=1e-6)
    assert renderer.psnr(a, b) == pytest.approx(oracles.psnr(a.tolist(), b.tolist()), abs=1e-6)


def test_metric_dimension_mismatch():
    with pytest.raises(ValueError, match="dimensions"):
        renderer.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

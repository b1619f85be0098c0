import json

import numpy as np
import pytest

from splatcodec import bitstream, data
from splatcodec.cli import build_report, main


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_toy):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene"
    data.save_dataset(small_toy[1], scene)
    out = root / "s.cgs"
    code = main(["train", "--scene", str(scene), "--lambda", "0.001", "--steps", "6",
                 "--out", str(out), "--k", "2", "--voxel", "0.3"])
    assert code == 0
    return root, scene, out


def test_train_writes_header_lambda(trained):
    root, _, out = trained
    assert main(["report", "--in", str(out), "--json", str(root / "r.json")]) == 0
    report = json.loads((root / "r.json").read_text())
    assert report["lambda"] == pytest.approx(0.001, rel=1e-7)


def test_report_totals_equal_file_size(trained):
    _, _, out = trained
    r = build_report(out.read_bytes())
    coded = r["bits_f"] + r["bits_Σ"] + r["bits_g"] + r["bits_hyper"] + r["bits_locations"]
    overhead = 8 * (r["header_bytes"] + r["weight_bytes"])
    assert coded + overhead == r["file_bits"] == 8 * out.stat().st_size


def test_trace_and_sidecar(trained):
    _, _, out = trained
    lines = (out.parent / (out.name + ".trace.csv")).read_text().splitlines()
    assert lines[0] == "step,L,D_bits,R_bits" and len(lines) == 7
    side = np.load(out.parent / (out.name + ".state.npz"))
    assert int(side["adam.t"]) == 6


def test_eval_twice_is_identical(trained):
    root, scene, out = trained
    for name in ("a.json", "b.json"):
        assert main(["eval", "--in", str(out), "--scene", str(scene), "--json", str(root / name)]) == 0
    a, b = (root / "a.json").read_bytes(), (root / "b.json").read_bytes()
    assert a == b
    m = json.loads(a)
    assert m["size_bytes"] == out.stat().st_size and m["views"][0]["view"] == 0


def test_decode_then_render_matches_in_memory(trained):
    root, scene, out = trained
    assert main(["decode", "--in", str(out), "--out", str(root / "dec"), "--scene", str(scene)]) == 0
    assert main(["render", "--in", str(out), "--scene", str(scene), "--camera", "1",
                 "--out", str(root / "v1.png")]) == 0
    cols = data.read_ply(root / "dec" / "gaussians.ply")
    dec = bitstream.read_scene(out.read_bytes())
    assert len(cols["x"]) == dec.scene.n_coupled
    assert np.array_equal(data.load_png(root / "v1.png"), data.load_png(root / "dec" / "view_0001.png"))


def test_toy_command(tmp_path):
    spec = json.dumps({"gaussian_count": 5, "camera_count": 2, "image_size": 12, "seed": 1})
    assert main(["toy", "--spec", spec, "--out", str(tmp_path / "toy")]) == 0
    ds = data.load_dataset(tmp_path / "toy")
    assert len(ds.cameras) == 2 and (tmp_path / "toy" / "ground_truth.ply").is_file()


def test_usage_errors_exit_2(capsys):
    assert main(["train", "--scene", "x"]) == 2
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert main(["eval", "--in", str(tmp_path / "none.cgs"), "--scene", str(tmp_path),
                 "--json", str(tmp_path / "o.json")]) == 1
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.cgs"
    bad.write_bytes(b"nope")
    assert main(["report", "--in", str(bad), "--json", str(tmp_path / "o.json")]) == 1

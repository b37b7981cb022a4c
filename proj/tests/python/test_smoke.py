import math
import os
import subprocess

import numpy as np
import pytest

import ctxdet


def test_box_geometry():
    a = ctxdet.BoundingBox(0, 0, 10, 10)
    b = ctxdet.BoundingBox(0, 0, 10, 7.5)
    assert ctxdet.iou(a, b) == 0.75
    assert ctxdet.iou(a, a) == 1.0
    off = ctxdet.encode_addon(a, b)
    back = ctxdet.decode_addon(a, off)
    assert back.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-12)


def test_hausdorff():
    ref = [(0, 0), (3, 4)]
    assert ctxdet.directed_hausdorff([(0, 0)], ref) == 0.0
    assert ctxdet.directed_hausdorff([(6, 8)], ref) == 5.0
    with pytest.raises(ctxdet.MissingSegmentation):
        ctxdet.directed_hausdorff([], ref)


def test_formula_constants():
    assert ctxdet.heatmap_peak() == 50.0
    box = ctxdet.BoundingBox(0, 0, 10, 10)
    assert ctxdet.relation_overlap_bits(box, ctxdet.BoundingBox(0, 0, 10, 7.5)) == [1, 1, 1, 0, 0, 0]
    assert ctxdet.OVERLAP_THRESHOLDS == [0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    rng = np.random.default_rng(0)
    regions = [ctxdet.BoundingBox(float(x), float(y), 5, 5) for x, y in rng.uniform(0, 50, (20, 2))]
    boxes, index = ctxdet.select_context_regions(regions, rng.uniform(size=(20, 3)), 64, 64)
    assert len(boxes) == ctxdet.CONTEXT_TOP_T + 1
    assert index[-1] == -1
    assert boxes[-1] == ctxdet.BoundingBox(0, 0, 64, 64)


def test_noisy_or_and_ap():
    assert ctxdet.noisy_or([]) == 0.0
    assert ctxdet.noisy_or([0.5, 0.5]) == pytest.approx(0.75)
    assert ctxdet.average_precision([0.9], [1], 1) == 1.0
    assert ctxdet.average_precision([0.9, 0.8], [0, 1], 2) == pytest.approx(51 * 0.5 / 101)
    assert math.isnan(ctxdet.average_precision([0.5], [0], 0))


def test_kmeans_blobs():
    rng = np.random.default_rng(1)
    centers = np.array([[0, 0, 0, 0], [5, 5, 5, 5], [-5, 5, -5, 5]], dtype=float)
    pts = np.concatenate([c + 0.1 * rng.standard_normal((50, 4)) for c in centers])
    cent, assign, sse = ctxdet.kmeans(pts, 3, seed=2)
    assert cent.shape == (3, 4)
    assert len(set(assign)) == 3
    assert all(b <= a + 1e-9 for a, b in zip(sse, sse[1:]))
    for c in centers:
        assert np.min(np.linalg.norm(cent - c, axis=1)) < 0.1


def test_config_round_trip():
    cfg = ctxdet.default_config()
    assert ctxdet.resolve_config(cfg) == cfg
    cfg["seed"] = 5
    assert ctxdet.resolve_config({"seed": 5})["seed"] == 5
    with pytest.raises(ctxdet.ConfigError):
        ctxdet.resolve_config({"no_such_key": 1})


def test_generate_and_evaluate(tmp_path):
    cfg = {"synth": {"scenes": 5}, "test_scenes": 3, "seed": 3}
    ctxdet.generate_split(__import__("json").dumps(cfg), True, tmp_path / "test")
    dets = tmp_path / "empty.csv"
    dets.write_text("image_id,category_id,x,y,w,h,score\n")
    aps = ctxdet.evaluate_files(dets, tmp_path / "test")
    assert {a["name"] for a in aps} >= {"person", "tv"}
    for a in aps:
        if a["num_gt"] > 0:
            assert a["ap"] == 0.0


CLI = os.environ.get("CTXDET_CLI")


@pytest.mark.skipif(not CLI, reason="CTXDET_CLI not set")
def test_cli_exit_codes(tmp_path):
    missing = subprocess.run([CLI, "synth-gen", "--config", str(tmp_path / "nope.json")], capture_output=True)
    assert missing.returncode == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"unknown": 1}')
    assert subprocess.run([CLI, "synth-gen", "--config", str(bad)], capture_output=True).returncode == 2
    assert subprocess.run([CLI, "--variant", "bogus", "eval"], capture_output=True).returncode == 2
    runtime = subprocess.run([CLI, "train-mil", "--out", str(tmp_path)], capture_output=True)
    assert runtime.returncode == 1

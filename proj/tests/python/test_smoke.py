# Copyright Contributors to the sparsedet3d project
# SPDX-License-Identifier: Apache-2.0

import math

import numpy as np
import pytest

import sparsedet3d as sd


def test_voxelize_averages_points_per_cell():
    pts = np.array([[0.01, 0.01, 0.01], [0.03, 0.01, 0.01], [0.5, 0.5, 0.5]])
    feats = np.array([[1.0], [3.0], [5.0]])
    coords, out = sd.voxelize(pts, feats, 1.0)
    assert coords.tolist() == [[0, 0, 0]]
    assert out[0, 0] == pytest.approx(3.0)


def test_voxelize_rejects_bad_voxel_size():
    with pytest.raises(ValueError):
        sd.voxelize(np.zeros((1, 3)), np.zeros((1, 1)), 0.0)


def test_submanifold_identity_kernel():
    coords = np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5]], dtype=np.int32)
    feats = np.arange(6, dtype=float).reshape(3, 2)
    kernel = np.zeros((27 * 2, 2))
    kernel[13 * 2:14 * 2] = np.eye(2)
    out_coords, out = sd.sparse_conv(coords, feats, kernel, kernel_size=3)
    assert (out_coords == coords).all()
    assert np.allclose(out, feats)


def test_iou_and_nms():
    a = np.array([0, 0, 0, 1, 1, 1, 0.0])
    b = np.array([0.5, 0, 0, 1, 1, 1, 0.0])
    assert sd.iou3d(a, a) == pytest.approx(1.0)
    assert sd.iou3d(a, b) == pytest.approx(1 / 3)
    boxes = np.stack([a, b, a + np.array([5, 0, 0, 0, 0, 0, 0])])
    assert sd.nms(boxes, [0.9, 0.8, 0.7], iou_thresh=0.3) == [0, 2]


def test_residual_round_trip():
    g = np.array([0.3, -0.2, 0.1, 0.5, 0.7, 0.9, 2.5])
    p = np.array([0.1, 0.0, 0.2, 0.4, 0.6, 1.0, -0.3])
    back = sd.decode_residual(sd.encode_residual(g, p), p)
    assert np.allclose(back[:6], g[:6])
    assert math.remainder(back[6] - g[6], 2 * math.pi) == pytest.approx(0.0, abs=1e-9)


def test_config_round_trip_and_errors():
    cfg = sd.RunConfig.parse("alpha = 0.2\n")
    assert "alpha = 0.2" in cfg.dump()
    assert sd.RunConfig.parse(cfg.dump()).dump() == cfg.dump()
    with pytest.raises(ValueError):
        sd.RunConfig.parse("unknown_key = 1\n")


def test_detector_train_infer_eval(tmp_path):
    scenes = sd.synth_scenes(2, seed=3)
    cfg = sd.RunConfig.parse("batch = 1\n")
    det = sd.Detector(cfg, scenes, seed=1)
    losses = det.train(scenes, steps=2)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    preds = [det.infer(s["points"], s["features"]) for s in scenes]
    for p in preds:
        assert p["boxes"].shape == (len(p["scores"]), 7)
    result = sd.eval_map(preds, scenes, 3)
    assert 0.0 <= result["map"][0] <= 1.0
    det.save(str(tmp_path / "m.ckpt"))
    again = sd.Detector.load(str(tmp_path / "m.ckpt"))
    assert again.config.dump() == det.config.dump()

import math
import os

import numpy as np
import pytest

from padm.harness.io import (export_pgm, read_archive, read_tensor, write_archive,
                             write_tensor)
from padm.harness.metrics import MetricsReport, psnr, rmse, ssim
from padm.harness.preprocess import (center_crop, denormalize, normalize, preprocess,
                                     resize_bilinear)


def test_tensor_file_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        for shape in ((7,), (5, 6), (2, 3, 4), (1, 2, 3, 4)):
            x = rng.standard_normal(shape).astype(dtype)
            path = tmp_path / "t.padt"
            write_tensor(path, x)
            back = read_tensor(path)
            assert back.dtype == x.dtype
            assert back.shape == x.shape
            assert np.array_equal(back.view(np.uint8), x.view(np.uint8))


def test_tensor_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.padt"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        read_tensor(path)


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "alpha": rng.standard_normal((3, 3)).astype(np.float32),
        "beta": rng.standard_normal(5).astype(np.float64),
    }
    meta = {"kind": "test", "nested": {"a": 1, "b": [1, 2, 3]}}
    path = tmp_path / "a.padc"
    write_archive(path, tensors, meta)
    t2, m2 = read_archive(path)
    assert m2 == meta
    assert set(t2) == set(tensors)
    for k in tensors:
        assert np.array_equal(t2[k], tensors[k])
        assert t2[k].dtype == tensors[k].dtype


def test_export_pgm(tmp_path):
    img = np.array([[-1.0, 0.0], [1.0, 2.0]], dtype=np.float32)
    path = tmp_path / "img.pgm"
    export_pgm(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P5")
    # -1 -> 0, 0 -> 128 (round), 1 -> 255, out of range clips
    assert raw[-4:] == bytes([0, 128, 255, 255])


def test_rmse_basics():
    x = np.random.default_rng(2).standard_normal((8, 8))
    assert rmse(x, x) == 0.0
    assert rmse(x, x + 1.0) == pytest.approx(1.0, abs=1e-12)
    assert rmse(x, x + 1.0) == rmse(x + 1.0, x)


def test_psnr_scalar_case():
    # MSE 0.01 at data range 2 -> 10 log10(400)
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)
    assert psnr(a, b, 2.0) == pytest.approx(10 * math.log10(400.0), abs=1e-10)
    assert psnr(a, b, 2.0) == pytest.approx(26.0206, abs=1e-4)
    assert psnr(a, a) == math.inf


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (32, 32))
    y = rng.uniform(-1, 1, (32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_penalizes_inversion():
    # zero-mean structured image vs its negative
    yy, xx = np.mgrid[0:32, 0:32]
    x = np.sin(xx / 3.0) * np.cos(yy / 5.0)
    assert ssim(x, -x) < 1.0


def test_center_crop():
    img = np.arange(36.0).reshape(6, 6)
    out = center_crop(img, 4)
    assert out.shape == (4, 4)
    assert out[0, 0] == img[1, 1]
    with pytest.raises(ValueError):
        center_crop(img, 7)


def test_resize_bilinear_hand_case():
    # 4x4 -> 8x8 with half-pixel centers: output sample k maps to
    # (k + 0.5) / 2 - 0.5 in input coordinates
    img = np.arange(16.0).reshape(4, 4)
    out = resize_bilinear(img, 8)
    assert out.shape == (8, 8)
    assert out[0, 0] == img[0, 0]  # corner clamps
    assert out[7, 7] == img[3, 3]
    # output row 1 maps to input coordinate 0.25: 0.75*row0 + 0.25*row1
    expected = 0.75 * img[0] + 0.25 * img[1]
    assert out[1, 0] == pytest.approx(expected[0], abs=1e-12)
    # img is linear (4 i + j), so interior samples reproduce it exactly
    assert out[3, 3] == pytest.approx(4 * 1.25 + 1.25, abs=1e-12)
    # identity when target equals source
    assert np.allclose(resize_bilinear(img, 4), img)


def test_normalize_round_trip():
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    n = normalize(img, 4.0)
    assert n.min() == -1.0 and n.max() == 1.0
    assert np.allclose(denormalize(n, 4.0), img)
    # constant image value v -> 2 v / vmax - 1
    c = np.full((3, 3), 1.5)
    assert np.allclose(normalize(c, 3.0), 0.0)
    with pytest.raises(ValueError):
        normalize(img, 0.0)


def test_preprocess_composition():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 2, (12, 12))
    out = preprocess(img, roi=8, target=16, vmax=2.0)
    assert out.shape == (16, 16)
    assert out.min() >= -1.0 - 1e-12 and out.max() <= 1.0 + 1e-12


def test_metrics_report_aggregate_is_mean():
    rng = np.random.default_rng(5)
    preds = [rng.uniform(-1, 1, (16, 16)) for _ in range(4)]
    gts = [rng.uniform(-1, 1, (16, 16)) for _ in range(4)]
    rep = MetricsReport.compute(preds, gts, ids=["a", "b", "c", "d"])
    assert len(rep.per_image) == 4
    for key in ("rmse", "ssim", "psnr"):
        assert rep.aggregate[key] == pytest.approx(
            np.mean([row[key] for row in rep.per_image]), abs=1e-12)
    assert [row["id"] for row in rep.per_image] == ["a", "b", "c", "d"]

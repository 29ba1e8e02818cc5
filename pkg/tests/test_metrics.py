import numpy as np
import pytest
import torch

import oracles
from mskd.data import Dataset
from mskd.errors import ConfigError, ShapeError
from mskd.metrics import (AVG, CSV_HEADER, MetricsReport, average_row, dsc, evaluate_model,
                          hausdorff, organ_rows, uncertainty_image, uncertainty_map)


def _mask(shape, *points):
    m = np.zeros(shape, bool)
    for p in points:
        m[p] = True
    return m


def test_dsc_examples():
    a = _mask((4, 4), (0, 0), (1, 1))
    assert dsc(a, a) == 1.0
    assert dsc(a, _mask((4, 4), (3, 3))) == 0.0
    pred = _mask((4, 4), (0, 0), (0, 1), (0, 2), (0, 3))
    gt = _mask((4, 4), (0, 2), (0, 3), (1, 0), (1, 1))
    assert dsc(pred, gt) == 0.5
    assert dsc(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)))


def test_hausdorff_examples():
    a = _mask((5, 5), (1, 1), (2, 3))
    assert hausdorff(a, a) == 0.0
    assert hausdorff(_mask((5, 5), (0, 0)), _mask((5, 5), (3, 4))) == pytest.approx(5.0, abs=1e-9)
    assert hausdorff(a, np.zeros((5, 5))) is None
    assert hausdorff(_mask((5, 5), (0, 0)), _mask((5, 5), (3, 4)), spacing=(2.0, 0.5)) == \
        pytest.approx(np.hypot(6.0, 2.0), abs=1e-9)
    with pytest.raises(ShapeError):
        hausdorff(np.ones((2, 2)), np.ones((3, 2)))


def test_hausdorff_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        a = rng.random((7, 6)) < 0.2
        b = rng.random((7, 6)) < 0.2
        spacing = tuple(rng.uniform(0.5, 2.0, size=2))
        ref = oracles.hausdorff(a.tolist(), b.tolist(), spacing)
        got = hausdorff(a, b, spacing)
        assert (got is None) == (ref is None)
        if ref is not None:
            assert got == pytest.approx(ref, abs=1e-9)


def test_translation_covariance():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = np.zeros((12, 12), bool)
        b = np.zeros((12, 12), bool)
        a[2:8, 2:8] = rng.random((6, 6)) < 0.4
        b[2:8, 2:8] = rng.random((6, 6)) < 0.4
        shift = (3, 2)
        a2, b2 = np.roll(a, shift, (0, 1)), np.roll(b, shift, (0, 1))
        assert dsc(a, b) == dsc(a2, b2)
        assert hausdorff(a, b) == hausdorff(a2, b2)


def _report():
    preds = np.array([[[0, 1], [2, 2]], [[1, 1], [0, 0]]])
    labels = np.array([[[0, 1], [2, 0]], [[1, 0], [0, 0]]])
    return MetricsReport(rows=organ_rows("M", preds, labels, 2))


def test_organ_rows_and_average():
    report = _report()
    r1, r2 = report.row("M", "1"), report.row("M", "2")
    assert r1.dsc_percent == pytest.approx(100 * (1.0 + 2 / 3) / 2)
    # organ 2 missing from image 2 in both maps: DSC 1, HD undefined
    assert r2.dsc_percent == pytest.approx(100 * (2 / 3 + 1.0) / 2)
    assert r2.n_hd_excluded == 1
    avg = report.average("M")
    assert avg.dsc_percent == pytest.approx((r1.dsc_percent + r2.dsc_percent) / 2)
    recomputed = average_row("M", [r1, r2])
    assert recomputed.dsc_percent == avg.dsc_percent and recomputed.hd == avg.hd


def test_report_csv_round_trip(tmp_path):
    report = _report()
    text = report.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    back = MetricsReport.from_csv(text)
    assert back.to_csv() == text
    assert back.methods() == ["M"] and back.organs() == ["1", "2"]
    with pytest.raises(ConfigError):
        MetricsReport.from_csv("a,b\n1,2\n")
    report.write(tmp_path)
    assert (tmp_path / "report.txt").read_text().splitlines()[0].split()[0] == "Method"


def test_undefined_hd_rendered_as_dash():
    preds = np.zeros((1, 4, 4), int)
    labels = np.zeros((1, 4, 4), int)
    labels[0, 1, 1] = 1
    report = MetricsReport(rows=organ_rows("Empty", preds, labels, 1))
    assert report.row("Empty", "1").hd is None
    assert ",-," in report.to_csv()
    assert report.average("Empty").organ == AVG


def _test_set():
    labels = np.zeros((3, 8, 8), np.uint8)
    labels[:, 1:3, 1:3] = 1
    labels[:, 5:7, 4:7] = 2
    return Dataset(images=np.zeros((3, 8, 8), np.float32), labels=labels,
                   kind="multi-organ", num_organs=2)


def test_evaluate_perfect_and_empty_predictors():
    test_set = _test_set()
    labels = torch.from_numpy(test_set.labels.astype(np.int64))

    def perfect(x):
        return labels[: len(x)].numpy()

    report = evaluate_model(perfect, test_set, "Perfect")
    for organ in ("1", "2", AVG):
        assert report.row("Perfect", organ).dsc_percent == 100.0
        assert report.row("Perfect", organ).hd == 0.0
    empty = evaluate_model(lambda x: np.zeros((len(x), 8, 8), int), test_set, "Empty")
    assert empty.average("Empty").dsc_percent == 0.0
    with pytest.raises(ConfigError):
        evaluate_model(perfect, test_set, "x", num_outputs=4)


def test_uncertainty_examples():
    probs = np.array([[[1.0, 0.5, 0.8]], [[0.0, 0.5, 0.2]]])
    assert uncertainty_map(probs)[0].tolist() == pytest.approx([0.0, 0.5, 0.2])
    img = np.asarray(uncertainty_image(uncertainty_map(probs)))
    assert img.dtype == np.uint8
    assert img[0, 0] == 255 and img[0, 1] == 0 and img[0, 0] > img[0, 2] > img[0, 1]
    with pytest.raises(ShapeError):
        uncertainty_map(np.zeros((2, 2)))

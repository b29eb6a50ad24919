import json

import numpy as np
import pytest

from mifuse.errors import ValidationError
from mifuse.evalkit import config_hash, curve_export, report_from_predictions, write_curve_csv, write_report


def test_perfect_predictions():
    r = report_from_predictions([0, 1, 2, 1], [0, 1, 2, 1], 3)
    assert r.unweighted_accuracy == 1.0 and r.plain_accuracy == 1.0
    assert np.array_equal(r.confusion, np.diag([1, 2, 1]))


def test_imbalanced_majority_guess():
    labels = [0] * 90 + [1] * 10
    r = report_from_predictions(labels, [0] * 100, 2)
    assert r.plain_accuracy == pytest.approx(0.9)
    assert r.unweighted_accuracy == pytest.approx(0.5)


def test_absent_class_is_excluded():
    r = report_from_predictions([0, 0, 1], [0, 1, 1], 3)
    assert r.excluded_classes == 1
    assert r.per_class_recall[2] is None
    assert r.unweighted_accuracy == pytest.approx((0.5 + 1.0) / 2)


def test_empty_rejected():
    with pytest.raises(ValidationError):
        report_from_predictions([], [], 2)


def test_report_file(tmp_path):
    r = report_from_predictions([0, 1], [0, 0], 2)
    doc = json.loads(write_report(tmp_path / "r.json", r, {"a": 1}, seed=4, split="dev").read_text())
    assert doc["seed"] == 4 and doc["split"] == "dev"
    assert doc["config_hash"] == config_hash({"a": 1}) != config_hash({"a": 2})
    assert doc["confusion"] == [[1, 0], [1, 0]]


def test_curve_export():
    assert curve_export([(0, 1.2, 0.5, 0.9)]) == [(0, 0.5)]
    log = [(0, 1.0, 0.4, 1.0), (1, 1.0, None, None), (2, 0.9, 0.6, 0.8)]
    assert curve_export(log) == [(0, 0.4), (2, 0.6)]
    assert curve_export([{"step": 3, "dev_ua": 0.7}]) == [(3, 0.7)]
    with pytest.raises(ValidationError):
        curve_export([(5, 1.0, 0.5), (4, 1.0, 0.6)])
    with pytest.raises(ValidationError):
        curve_export([])


def test_curve_csv(tmp_path):
    p = write_curve_csv(tmp_path / "c.csv", [(0, 0.5), (100, 0.625)])
    assert p.read_text() == "step,dev_ua\n0,0.5\n100,0.625\n"

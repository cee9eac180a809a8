import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from tcl_lab.backbone import BackboneConfig, init_params
from tcl_lab.kinsynth import GenerationConfig, Standardizer, build_splits
from tcl_lab.metrics import RunReport, evaluate, forgetting_matrix, mpjpe
from tcl_lab.trainer import StageResult

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "run_report.schema.json").read_text())
BB = BackboneConfig(hidden_dims=[6], alpha_head_hidden=3)


def test_mpjpe_examples():
    gt = np.zeros((4, 1, 3))
    assert mpjpe(gt, gt, 1) == 0.0
    pred = gt.copy()
    pred[2, 0] = [3.0, 4.0, 0.0]
    assert mpjpe(pred, gt, 3) == 5.0
    two = np.zeros((1, 2, 3))
    two_pred = two.copy()
    two_pred[0, 0, 0], two_pred[0, 1, 2] = 2.0, 4.0
    assert mpjpe(two_pred, two, 1) == 3.0


def test_mpjpe_averages_over_samples():
    gt = np.zeros((2, 1, 1, 3))
    pred = gt.copy()
    pred[0, 0, 0, 0] = 2.0
    assert mpjpe(pred, gt, 1) == 1.0


@pytest.mark.parametrize("t", [0, 5])
def test_mpjpe_horizon_range(t):
    gt = np.zeros((4, 2, 3))
    with pytest.raises(ValueError):
        mpjpe(gt, gt, t)


def test_mpjpe_is_permutation_invariant():
    rng = np.random.default_rng(0)
    pred, gt = rng.normal(size=(9, 5, 3, 3)), rng.normal(size=(9, 5, 3, 3))
    perm = rng.permutation(9)
    assert mpjpe(pred[perm], gt[perm], 4) == pytest.approx(mpjpe(pred, gt, 4), rel=1e-14)


@pytest.fixture(scope="module")
def splits():
    return build_splits(GenerationConfig(num_sequences=8, T=40, stride=3))


def test_replication_on_constant_sequences_is_zero():
    splits = build_splits(GenerationConfig(num_sequences=6, T=40, amp_range=(0.0, 0.0), noise_std=0.0))
    norm = Standardizer.fit(splits["train"])
    report = evaluate(init_params(BB), BB, splits["test"], norm, horizons=range(1, 26))
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in report.mpjpe_by_horizon.values())


def test_zero_init_matches_replication_oracle(splits):
    norm = Standardizer.fit(splits["train"])
    test = splits["test"]
    report = evaluate(init_params(BB), BB, test, norm)
    last = test.history[:, -1:]
    for h, v in report.mpjpe_by_horizon.items():
        oracle = np.linalg.norm(test.future[:, h - 1] - last[:, 0], axis=-1).mean()
        assert v == pytest.approx(oracle, abs=1e-12)


def test_avg_error_is_mean_of_all_horizons(splits):
    norm = Standardizer.fit(splits["train"])
    report = evaluate(init_params(BB), BB, splits["test"], norm, horizons=range(1, 26))
    assert report.avg_error == pytest.approx(np.mean(list(report.mpjpe_by_horizon.values())), abs=1e-15)


def test_evaluate_is_deterministic(splits):
    norm = Standardizer.fit(splits["train"])
    a = evaluate(init_params(BB), BB, splits["test"], norm)
    b = evaluate(init_params(BB), BB, splits["test"], norm)
    assert a.to_dict() == b.to_dict()


def test_evaluate_errors(splits):
    norm = Standardizer.fit(splits["train"])
    with pytest.raises(ValueError, match="empty"):
        evaluate(init_params(BB), BB, splits["test"].subset([]), norm)
    with pytest.raises(ValueError, match="horizon"):
        evaluate(init_params(BB), BB, splits["test"], norm, horizons=[26])


def test_forgetting_matrix_is_lower_triangular():
    stages = [StageResult(1, None, [], [0.1]), StageResult(2, 0.2, [], [0.12, 0.3]),
              StageResult(3, 0.3, [], [0.13, 0.31, 0.5])]
    assert forgetting_matrix(stages) == [[0.1, None, None], [0.12, 0.3, None], [0.13, 0.31, 0.5]]


def test_report_round_trip_and_schema(tmp_path, splits):
    norm = Standardizer.fit(splits["train"])
    stages = [StageResult(1, None, [], [0.1]), StageResult(2, 0.25, [], [0.12, 0.3])]
    report = evaluate(init_params(BB), BB, splits["test"], norm, stages=stages, seed=4)
    path = tmp_path / "r.json"
    report.save(path)
    doc = json.loads(path.read_text())
    jsonschema.validate(doc, SCHEMA)
    back = RunReport.load(path)
    assert back.to_dict() == report.to_dict()
    assert back.frozen_alphas == [0.25] and back.seed == 4


def test_report_rejects_unknown_schema():
    with pytest.raises(ValueError):
        RunReport.from_dict({"schema": "other/v9", "mpjpe_by_horizon": {}, "avg_error": 0.0})

import numpy as np
import pytest

from afedcl.data import Dataset
from afedcl.metrics import (
    MetricsRow,
    confusion_matrix,
    evaluate,
    export_features_csv,
    ols_fit,
    read_metrics_csv,
    regression_discloss_vs_fusion,
    write_metrics_csv,
)
from afedcl.models import NetworkConfig, build_models


def constant_predictor(label):
    return lambda features: np.full(len(features), label, dtype=np.int64)


def test_evaluate_all_correct():
    ds = Dataset(np.zeros((4, 2)), np.array([1, 1, 1, 1]), num_classes=2)
    accuracy, f1 = evaluate(constant_predictor(1), ds)
    assert accuracy == 1.0 and f1 == 1.0


def test_evaluate_binary_closed_form():
    # All predictions class 0, truth half/half: F1(0) = 2/3, F1(1) = 0.
    ds = Dataset(np.zeros((4, 2)), np.array([0, 0, 1, 1]), num_classes=2)
    accuracy, f1 = evaluate(constant_predictor(0), ds)
    assert accuracy == 0.5
    assert f1 == pytest.approx((2.0 / 3.0 + 0.0) / 2.0, abs=1e-12)


def test_evaluate_excludes_absent_classes():
    # class 2 never appears in the truth, so it does not dilute the mean
    ds = Dataset(np.zeros((4, 2)), np.array([0, 0, 1, 1]), num_classes=3)
    predicted = np.array([0, 2, 1, 1])
    accuracy, f1 = evaluate(lambda f: predicted, ds)
    assert accuracy == 0.75
    f1_class0 = 2 * 1 / (2 * 1 + 0 + 1)
    f1_class1 = 2 * 2 / (2 * 2 + 0 + 0)
    assert f1 == pytest.approx((f1_class0 + f1_class1) / 2, abs=1e-12)


def test_evaluate_empty_test_set():
    ds = Dataset(np.zeros((1, 2)), np.array([0]), num_classes=2)
    with pytest.raises(ValueError):
        evaluate(constant_predictor(0), ds.take([]))


def test_evaluate_matches_confusion_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, k = int(rng.integers(2, 40)), int(rng.integers(2, 6))
        truth = rng.integers(0, k, size=n)
        predicted = rng.integers(0, k, size=n)
        ds = Dataset(np.zeros((n, 1)), truth, num_classes=k)
        accuracy, f1 = evaluate(lambda f, p=predicted: p, ds)

        matrix = confusion_matrix(truth, predicted, k)
        assert accuracy == pytest.approx(np.trace(matrix) / n, abs=1e-12)
        scores = []
        for c in range(k):
            tp = matrix[c, c]
            fp = matrix[:, c].sum() - tp
            fn = matrix[c, :].sum() - tp
            if tp + fn == 0:
                continue  # class absent from the truth
            scores.append(2 * tp / (2 * tp + fp + fn))
        assert f1 == pytest.approx(np.mean(scores), abs=1e-12)


def test_macro_f1_one_iff_diagonal():
    truth = np.array([0, 0, 1, 2])
    ds = Dataset(np.zeros((4, 2)), truth, num_classes=4)
    _, perfect = evaluate(lambda f: truth.copy(), ds)
    assert perfect == 1.0
    # class 3 never predicted or present, so it is irrelevant; one error breaks equality
    off = truth.copy()
    off[0] = 1
    _, imperfect = evaluate(lambda f: off, ds)
    assert imperfect < 1.0


def test_ols_closed_form():
    slope, intercept = ols_fit([0.0, 1.0], [1.0, 0.0])
    assert slope == pytest.approx(-1.0, abs=1e-12)
    assert intercept == pytest.approx(1.0, abs=1e-12)


def test_ols_degenerate_variance():
    with pytest.raises(ValueError, match="degenerate variance"):
        ols_fit([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])


def test_regression_rows():
    rows = [
        MetricsRow(5, "0", discrimination_loss=0.0, fusion_weight=1.0),
        MetricsRow(5, "1", discrimination_loss=1.0, fusion_weight=0.0),
        MetricsRow(5, "global", discrimination_loss=0.5, fusion_weight=0.5),
    ]
    slope, intercept = regression_discloss_vs_fusion(rows)
    assert slope == pytest.approx(-1.0)
    assert intercept == pytest.approx(1.0)
    with pytest.raises(ValueError):
        regression_discloss_vs_fusion(rows[:1])


def test_metrics_csv_header_only(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv([], str(path))
    content = path.read_text()
    assert content.splitlines() == [
        "round,client_id,classification_loss,discrimination_loss,discriminator_accuracy,"
        "fused_loss,fusion_weight,train_accuracy,test_accuracy,macro_f1,aggregation_weight"
    ]


def test_metrics_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    rows = []
    for r in range(3):
        rows.append(
            MetricsRow(
                round=r,
                client_id=str(r % 2),
                classification_loss=float(rng.standard_normal()),
                discrimination_loss=float(np.exp(rng.standard_normal())),
                discriminator_accuracy=float(rng.uniform()),
                fused_loss=None,
                fusion_weight=float(rng.uniform(-1, 2)),
                train_accuracy=float(rng.uniform()),
                test_accuracy=float(rng.uniform()),
                macro_f1=float(rng.uniform()),
                aggregation_weight=None,
            )
        )
    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, str(path))
    assert read_metrics_csv(str(path)) == rows  # float repr round-trips exactly


def test_feature_export_row_count(tmp_path):
    config = NetworkConfig(input_dim=3, num_classes=2, feature_dim=4, encoder_hidden=())
    encoder, _, _ = build_models(config, seed=0)
    rng = np.random.default_rng(2)
    ds = Dataset(rng.standard_normal((7, 3)), rng.integers(0, 2, size=7), num_classes=2)
    path = tmp_path / "features.csv"
    export_features_csv(encoder, ds, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "f0,f1,f2,f3,label"
    assert len(lines) == 1 + len(ds)

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detl.data import LabeledDataset, Sample, generate_synthetic
from detl.evaluation import ConfusionMatrix, CvResult, evaluate, format_accuracy, run_cv, summarize
from detl.models import ModelError, build_preset
from detl.transfer import finetune_config, pretrain, pretrain_config

CLASSES = ("normal", "pneumonia", "other_disease", "covid19")


def labelled(labels, shape=(1, 32, 32)):
    return LabeledDataset([Sample(np.full(shape, 0.1 * (i % 7), np.float32), int(y), f"s{i}")
                           for i, y in enumerate(labels)], CLASSES)


def constant_model(winner, num_classes=4):
    m = build_preset("mini-res", (1, 32, 32), num_classes, widths=(2,))
    head = len(m.layers) - 1
    m.params[head]["weight"].data[...] = 0
    m.params[head]["bias"].data[...] = 0
    m.params[head]["bias"].data[winner] = 1
    return m


def test_constant_model_fills_one_column():
    ds = labelled(np.repeat(np.arange(4), 10))
    cm = evaluate(constant_model(2), ds)
    assert cm.counts[:, 2].tolist() == [10, 10, 10, 10]
    assert cm.counts.sum() == 40 and cm.accuracy == 0.25


def test_perfect_classifier_is_diagonal():
    y = np.arange(10) % 4
    cm = ConfusionMatrix.from_predictions(y, y, CLASSES)
    assert np.array_equal(cm.counts, np.diag(np.bincount(y, minlength=4)))
    assert np.trace(cm.counts) == 10 and cm.accuracy == 1.0


def test_ties_break_to_lowest_index():
    m = constant_model(0)
    head = len(m.layers) - 1
    m.params[head]["bias"].data[...] = 0.5  # every logit equal
    assert evaluate(m, labelled([3, 1])).counts[:, 0].tolist() == [0, 1, 0, 1]


def test_evaluate_errors_and_purity():
    with pytest.raises(ValueError, match="empty"):
        evaluate(constant_model(0), labelled([]))
    with pytest.raises(ModelError):
        evaluate(constant_model(0, num_classes=2), labelled([0, 1]))
    ds = labelled([0, 1, 2, 3, 1])
    m = build_preset("mini-res", (1, 32, 32), 4, widths=(2,), seed=3)
    assert np.array_equal(evaluate(m, ds).counts, evaluate(m, ds).counts)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_accuracy_and_recall_match_tally(pairs):
    y, p = map(np.array, zip(*pairs))
    cm = ConfusionMatrix.from_predictions(y, p, CLASSES)
    hits = sum(1 for a, b in pairs if a == b)
    assert cm.accuracy == hits / len(pairs)
    assert cm.total == len(pairs)
    assert cm.counts.sum(axis=1).tolist() == [int(np.sum(y == k)) for k in range(4)]
    for k, r in enumerate(cm.recall()):
        n = int(np.sum(y == k))
        if n:
            assert r == sum(1 for a, b in pairs if a == b == k) / n
        else:
            assert np.isnan(r)


def test_matrix_validation_and_csv():
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((3, 3)), CLASSES)
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.ones((4, 4)), CLASSES)
    cm = ConfusionMatrix(np.arange(16).reshape(4, 4), CLASSES)
    lines = cm.to_csv().splitlines()
    assert lines[0] == "true\\pred,normal,pneumonia,other_disease,covid19"
    assert lines[2] == "pneumonia,4,5,6,7"


def result_with(accs, n=10):
    mats = []
    for a in accs:
        hits = int(round(a * n))
        mats.append(ConfusionMatrix([[hits, n - hits], [0, 0]], ("a", "b")))
    return CvResult("mini-vgg", mats)


def test_mean_and_population_std():
    r = result_with([0.8, 1.0])
    assert r.mean == pytest.approx(0.9) and r.std == pytest.approx(0.1)
    assert result_with([0.7]).std == 0


@given(st.lists(st.tuples(st.integers(1, 30), st.integers(0, 30)), min_size=1, max_size=6))
def test_summed_accuracy_is_size_weighted_mean(folds):
    mats = [ConfusionMatrix([[min(h, n), n - min(h, n)], [0, 0]], ("a", "b")) for n, h in folds]
    r = CvResult("x", mats)
    sizes = np.array([m.total for m in mats])
    assert r.summed.accuracy == pytest.approx(float(np.sum(r.fold_accuracies * sizes) / sizes.sum()))
    assert np.array_equal(r.summed.counts, sum(m.counts for m in mats))


def test_format_matches_reference_style():
    assert format_accuracy(0.9013, 0.0014) == "90.13% ± 0.14"


def test_summary_text_and_csv():
    text, csv = summarize(result_with([0.8, 1.0]))
    assert "90.00% ± 10.00" in text and "reference (VGGNet" in text and "90.13% ± 0.14" in text
    rows = csv.splitlines()
    assert rows[0] == "fold,accuracy" and rows[1] == "1,0.800000"
    assert rows[-1] == "summary,0.900000,0.100000"


@pytest.fixture(scope="module")
def tiny_checkpoint():
    data_a = generate_synthetic((20, 20), 32, seed=21)
    model = build_preset("mini-vgg", (1, 32, 32), 2, widths=(4, 4, 8, 8), units=(16,))
    return pretrain(model, data_a, pretrain_config(epochs=2, batch_size=16, holdout_per_class=5))[0]


def test_cv_accounting_and_determinism(tiny_checkpoint):
    data_b = generate_synthetic((11, 9, 8, 7), 32, seed=22)
    cfg = finetune_config(epochs=2, batch_size=8, augment=False)
    seen = []
    a = run_cv("mini-vgg", tiny_checkpoint, data_b, k=2, seed=3, config=cfg, on_fold=lambda f, cm, m: seen.append(f))
    b = run_cv("mini-vgg", tiny_checkpoint, data_b, k=2, seed=3, config=cfg)
    assert seen == [0, 1]
    assert a.summed.total == len(data_b)
    assert a.summed.counts.sum(axis=1).tolist() == [11, 9, 8, 7]
    assert [m.counts.tolist() for m in a.fold_matrices] == [m.counts.tolist() for m in b.fold_matrices]
    assert summarize(a) == summarize(b)


def test_cv_failure_names_fold(tiny_checkpoint, monkeypatch):
    import detl.evaluation as ev

    calls = []

    def flaky(model, data, config, validation=None):
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return model, None

    monkeypatch.setattr(ev, "finetune", flaky)
    with pytest.raises(RuntimeError, match="fold 2 failed: boom"):
        run_cv("mini-vgg", tiny_checkpoint, generate_synthetic((4, 4, 4, 4), 32), k=2)


def test_cv_rejects_other_architecture(tiny_checkpoint):
    with pytest.raises(ModelError):
        run_cv("mini-res", tiny_checkpoint, generate_synthetic((4, 4, 4, 4), 32), k=2)

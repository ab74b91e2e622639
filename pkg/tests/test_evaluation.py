import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microseg.evaluation import (
    ConfusionMatrix,
    accumulate,
    emit_report,
    load_run_summary,
    miou,
    read_summary,
    summary_rows,
)


def test_confusion_counts_brute_force(rng):
    labels = (0, 1, 2, 5)
    gt = rng.choice(labels, size=(6, 7))
    pred = rng.choice(labels, size=(6, 7))
    conf = accumulate(ConfusionMatrix.for_classes({1, 2, 5}), pred, gt)
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            assert conf.counts[i, j] == np.sum((gt == a) & (pred == b))
    with pytest.raises(ValueError, match="not on the evaluation axis"):
        accumulate(conf, np.full((1, 1), 7), np.zeros((1, 1)))


def test_miou_hand_example():
    conf = ConfusionMatrix((0, 1, 2, 3))
    conf.counts[:] = [[5, 1, 0, 0], [0, 3, 1, 0], [0, 0, 4, 0], [0, 0, 0, 0]]
    rep = miou(conf, {1}, {2, 3})
    assert rep.per_class_iou[1] == pytest.approx(3 / 5)
    assert rep.per_class_iou[2] == pytest.approx(4 / 5)
    assert math.isnan(rep.per_class_iou[3]) and rep.undefined == {3}
    assert rep.base_miou == pytest.approx(0.6) and rep.novel_miou == pytest.approx(0.8)
    assert rep.all_miou == pytest.approx(0.7)


def test_miou_groups_must_match():
    conf = ConfusionMatrix.for_classes({1, 2})
    with pytest.raises(ValueError):
        miou(conf, {1}, {1, 2})
    with pytest.raises(ValueError):
        miou(conf, {1}, set())


def test_merge():
    a = accumulate(ConfusionMatrix.for_classes({1}), np.array([1, 0]), np.array([1, 1]))
    b = accumulate(ConfusionMatrix.for_classes({1}), np.array([0]), np.array([0]))
    assert (a + b).counts.tolist() == [[1, 0], [1, 1]]
    with pytest.raises(ValueError):
        a + ConfusionMatrix.for_classes({2})


def _fake_run(root, name, variant, values):
    run = root / name
    run.mkdir()
    (run / "variant.txt").write_text(variant + "\n")
    lines = ["step,class_id,iou"]
    for step, v in enumerate(values, 1):
        conf = ConfusionMatrix((0, 1, 2))
        conf.counts[:] = [[10, 0, 0], [0, v, 10 - v], [0, 0, 10]]
        lines += [",".join(r) for r in summary_rows(step, miou(conf, {1}, {2}))]
    (run / "summary.csv").write_text("\n".join(lines) + "\n")
    return run


def test_report_is_idempotent_and_averages_seeds(tmp_path):
    runs = [_fake_run(tmp_path, "a0", "full", [10, 5]), _fake_run(tmp_path, "a1", "full", [10, 7])]
    out1 = emit_report(runs, tmp_path / "r1")
    out2 = emit_report(runs, tmp_path / "r2")
    for key in out1:
        assert out1[key].read_bytes() == out2[key].read_bytes()
    rows = out1["comparison"].read_text().splitlines()
    assert rows[0] == "variant,step,base_miou,novel_miou,all_miou"
    step2 = rows[2].split(",")
    assert float(step2[2]) == pytest.approx((0.5 + 0.7) / 2, rel=1e-5)
    assert read_summary(runs[0] / "summary.csv")[1]["base"] == 1.0
    assert load_run_summary(runs[0]).variant == "full"


def test_report_names_missing_files(tmp_path):
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "variant.txt").write_text("full\n")
    with pytest.raises(FileNotFoundError, match="broken"):
        emit_report([tmp_path / "broken"], tmp_path / "out")


def test_two_class_hand_case():
    conf = ConfusionMatrix((0, 1, 2))
    conf.counts[1:, 1:] = [[3, 1], [1, 3]]
    rep = miou(conf, {1}, {2})
    assert rep.per_class_iou == {1: pytest.approx(0.6), 2: pytest.approx(0.6)}
    assert rep.all_miou == pytest.approx(0.6)


def test_unseen_predictions_count_as_false_negatives():
    conf = accumulate(ConfusionMatrix.for_classes({1}), np.array([0, 1, 1]), np.array([1, 1, 0]))
    assert miou(conf, {1}, set()).per_class_iou[1] == pytest.approx(1 / 3)


@given(st.integers(0, 2**16), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_accumulation_is_associative(seed, parts):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=(8, 5, 5))
    pred = rng.integers(0, 4, size=(8, 5, 5))
    whole = accumulate(ConfusionMatrix.for_classes({1, 2, 3}), pred, gt)
    pieces = [
        accumulate(ConfusionMatrix.for_classes({1, 2, 3}), p, g)
        for p, g in zip(np.array_split(pred, parts), np.array_split(gt, parts))
    ]
    total = pieces[0]
    for p in pieces[1:]:
        total = total + p
    assert np.array_equal(total.counts, whole.counts)
    rep = miou(whole, {1}, {2, 3})
    assert all(0.0 <= v <= 1.0 for v in rep.per_class_iou.values())

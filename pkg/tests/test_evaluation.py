import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from protokd.augment import AugmentPolicy, make_rng
from protokd.data import SplitSpec, SyntheticSpec, generate_synthetic
from protokd.encoder import Checkpoint, EncoderConfig, StudentHead, WideResNet
from protokd.evaluation import (
    AggregateReport,
    TrialResult,
    classify,
    nearest_prototype,
    paired_margins,
    per_class_metrics,
    run_trials,
    write_ablation_csv,
    write_class_table_csv,
    write_confusion_csv,
    write_report_json,
    write_trials_csv,
)
from protokd.trainer import TrainConfig

TOY = EncoderConfig(depth=10, width_factor=1, embed_dim=8, input_size=8)


def _brute_metrics(pred, true, C):
    conf = np.zeros((C, C), dtype=int)
    for p, t in zip(pred, true):
        conf[t][p] += 1
    P, R, F = [], [], []
    for c in range(C):
        tp = conf[c][c]
        fp = sum(conf[r][c] for r in range(C)) - tp
        fn = sum(conf[c]) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        P.append(p)
        R.append(r)
        F.append(2 * p * r / (p + r) if p + r else 0.0)
    return conf, P, R, F


def test_nearest_prototype_simple_and_tie():
    protos = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pred, prob = nearest_prototype(np.array([[0.0, 10.0], [5.0, 0.0]]), protos)
    assert pred.tolist() == [2, 0]  # second row is an exact tie between 0 and 1
    assert prob[1, 0] == prob[1, 1]
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-12)


def _checkpoint(C=3, seed=0):
    enc = WideResNet(TOY, make_rng(seed))
    head = StudentHead(TOY.embed_dim, C, make_rng(seed + 1))
    protos = make_rng(seed + 2).standard_normal((C, TOY.embed_dim)).astype(np.float32)
    return Checkpoint(TOY, enc.state_dict(), head.state_dict(), protos, [str(c) for c in range(C)]), enc, head


def test_classify_matches_distance_loop_oracle():
    ck, enc, _ = _checkpoint(4)
    x = make_rng(5).random((50, 3, 8, 8)).astype(np.float32)
    pred, prob = classify(ck, x)
    emb = enc.embed_numpy(x)
    for i, e in enumerate(emb):
        dists = [sum((float(e[k]) - float(p[k])) ** 2 for k in range(len(e))) for p in ck.prototypes]
        assert pred[i] == int(np.argmin(dists))
    assert prob.argmax(axis=1).tolist() == pred.tolist()


def test_classify_permutation_equivariant_and_deterministic():
    ck, _, _ = _checkpoint()
    x = make_rng(6).random((9, 3, 8, 8)).astype(np.float32)
    perm = make_rng(7).permutation(9)
    a, pa = classify(ck, x)
    b, pb = classify(ck, x[perm])
    assert np.array_equal(a[perm], b)
    # float32 BLAS blocking depends on row order
    np.testing.assert_allclose(pa[perm], pb, atol=1e-6)
    assert np.array_equal(classify(ck, x)[0], a)


def test_classify_head_rule_and_input_check():
    ck, enc, head = _checkpoint()
    x = make_rng(8).random((4, 3, 8, 8)).astype(np.float32)
    pred, _ = classify(ck, x, rule="head")
    logits = enc.embed_numpy(x) @ head.weight.data.T + head.bias.data
    assert pred.tolist() == logits.argmax(axis=1).tolist()
    with pytest.raises(ValueError, match="do not match"):
        classify(ck, np.zeros((2, 1, 8, 8), np.float32))


def test_metrics_perfect_classifier():
    rep = per_class_metrics([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert rep.precision.tolist() == [1, 1, 1] and rep.recall.tolist() == [1, 1, 1]
    assert rep.macro_f1 == 1.0


def test_metrics_hand_counted_example():
    rep = per_class_metrics([0, 1, 1, 1], [0, 0, 1, 1], 2)
    assert rep.precision[0] == 1.0 and rep.recall[0] == 0.5
    assert rep.precision[1] == pytest.approx(2 / 3) and rep.recall[1] == 1.0
    assert rep.macro_precision == pytest.approx(5 / 6, abs=1e-3)
    assert rep.macro_recall == pytest.approx(0.75)


def test_metrics_absent_class_contributes_zero():
    rep = per_class_metrics([0, 1], [0, 1], 3)
    assert (rep.precision[2], rep.recall[2], rep.f1[2]) == (0.0, 0.0, 0.0)
    assert rep.macro_precision == pytest.approx(2 / 3)


def test_metrics_errors():
    with pytest.raises(ValueError, match="equal-length"):
        per_class_metrics([0, 1], [0], 2)
    with pytest.raises(ValueError, match="outside"):
        per_class_metrics([0, 2], [0, 1], 2)
    with pytest.raises(ValueError, match="outside"):
        per_class_metrics([0, 1], [-1, 1], 2)


def test_metrics_match_brute_force_oracle():
    rng = make_rng(123)
    for _ in range(100):
        C = int(rng.integers(1, 11))
        N = int(rng.integers(1, 1001))
        pred = rng.integers(0, C, N)
        true = rng.integers(0, C, N)
        conf, P, R, F = _brute_metrics(pred, true, C)
        rep = per_class_metrics(pred, true, C)
        assert np.array_equal(rep.confusion, conf)
        assert rep.precision.tolist() == P
        assert rep.recall.tolist() == R
        assert rep.f1.tolist() == F
        assert rep.macro_f1 == float(np.mean(F))


def test_weighted_average():
    rep = per_class_metrics([0, 0, 1], [0, 0, 0], 2)
    assert rep.weighted("recall") == pytest.approx(2 / 3)
    assert rep.macro_recall == pytest.approx(1 / 3)


def _tiny_run(methods, n_trials=2):
    ds = generate_synthetic(SyntheticSpec(num_classes=3, per_class=6, image_size=8, intra_class_variance=0.3))
    base = TrainConfig(epochs=1, phase1_iters=1, phase2_iters=1)
    cfgs = {m: replace(base, method=m) for m in methods}
    return run_trials(ds, cfgs, TOY, SplitSpec(1, 2), AugmentPolicy(), n_trials=n_trials, base_seed=10)


def test_run_trials_pairs_splits_across_methods():
    aggs = _tiny_run(["protonet", "protokd"])
    a, b = aggs["protonet"], aggs["protokd"]
    assert a.trial_seeds == b.trial_seeds == [10, 11]
    assert [t.split_checksum for t in a.trials] == [t.split_checksum for t in b.trials]
    assert a.trials[0].split_checksum != a.trials[1].split_checksum
    assert len(paired_margins(b, a)) == 2
    assert b.ok[0].head_report is not None and a.ok[0].head_report is None


def test_single_trial_aggregation_equals_trial():
    agg = _tiny_run(["protonet"], n_trials=1)["protonet"]
    s = agg.summary()
    assert s["f1"]["mean"] == agg.trials[0].report.macro_f1
    assert s["f1"]["std"] == 0.0


def test_aggregate_mean_within_trial_range():
    reports = [per_class_metrics(make_rng(i).integers(0, 4, 30), make_rng(i + 50).integers(0, 4, 30), 4) for i in range(6)]
    agg = AggregateReport("m", [TrialResult(i, "x", r) for i, r in enumerate(reports)])
    vals = [r.macro_f1 for r in reports]
    assert min(vals) <= agg.summary()["f1"]["mean"] <= max(vals)
    agg.trials.append(TrialResult(99, "y", error="diverged"))
    assert len(agg.ok) == 6


def test_paired_margins_rejects_unpaired():
    r = per_class_metrics([0, 1], [0, 1], 2)
    a = AggregateReport("a", [TrialResult(0, "s1", r)])
    b = AggregateReport("b", [TrialResult(0, "s2", r)])
    with pytest.raises(ValueError, match="not paired"):
        paired_margins(a, b)


def test_exports(tmp_path):
    rep = per_class_metrics([0, 1, 1, 2], [0, 1, 2, 2], 3, ["a", "b", "c"])
    write_report_json(tmp_path / "m.json", rep)
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["macro"]["f1"] == pytest.approx(np.mean([c["f1"] for c in d["per_class"]]))
    write_confusion_csv(tmp_path / "c.csv", rep)
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0][1:] == ["a", "b", "c"] and rows[3] == ["c", "0", "1", "1"]
    agg = {"m1": AggregateReport("m1", [TrialResult(0, "s", rep), TrialResult(1, "t", error="x")])}
    write_trials_csv(tmp_path / "t.csv", agg)
    write_class_table_csv(tmp_path / "k.csv", agg)
    write_ablation_csv(tmp_path / "a.csv", agg)
    trows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(trows) == 3 + 1 + 1 + 2
    arows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert arows[0]["trials_ok"] == "1"
    krows = list(csv.reader(open(tmp_path / "k.csv")))
    assert krows[-1][0] == "average" and len(krows) == 5

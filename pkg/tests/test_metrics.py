import json

import numpy as np
import pytest

from d2monitor.cascade import CascadeBundle, classify_states, expected_params, train_cascade
from d2monitor.errors import LengthMismatch
from d2monitor.metrics import Confusion, confusion, evaluate, macro_f1, scores
from d2monitor.probes import param_count
from d2monitor.synth import SynthConfig, generate

from oracles import confusion_scores


def test_example_confusion():
    s = scores(Confusion(tp=8, fp=2, fn=1, tn=9))
    assert s["precision_pos"] == pytest.approx(0.8)
    assert s["recall_pos"] == pytest.approx(8 / 9)
    assert s["f1_pos"] == pytest.approx(0.842, abs=5e-4)
    assert s["f2_pos"] == pytest.approx(20 / 23)  # 0.8696, listed truncated as 0.869
    assert abs(s["f2_pos"] - 0.869) < 1e-3
    assert s["f1_neg"] == pytest.approx(0.857, abs=5e-4)
    assert s["f1_macro"] == pytest.approx(0.850, abs=5e-4)
    assert s["frr"] == pytest.approx(0.1818, abs=5e-5)
    assert s["accuracy"] == pytest.approx(17 / 20)


def test_perfect_and_degenerate():
    y = np.array([0, 1, 1, 0])
    c = confusion(y, y)
    assert c.fp == c.fn == 0
    s = scores(c)
    assert all(s[k] == 1.0 for k in ("accuracy", "f1_macro", "f2_pos", "precision_pos", "recall_pos"))
    assert s["frr"] == 0.0
    c = confusion(np.ones(5), np.zeros(5))
    assert (c.tp, c.fp) == (0, 5)
    s = scores(confusion(np.zeros(4), np.zeros(4)))
    assert s["f1_pos"] == 0.0 and s["frr"] == 0.0


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion([0, 1], [0])


def test_counting_oracle(rng):
    p, y = rng.integers(0, 2, 200), rng.integers(0, 2, 200)
    c = confusion(p, y)
    tp = fp = fn = tn = 0
    for a, b in zip(p, y):
        if a and b:
            tp += 1
        elif a:
            fp += 1
        elif b:
            fn += 1
        else:
            tn += 1
    assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)


def test_scores_vs_reference(rng):
    for _ in range(50):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 30, 4))
        got, ref = scores(Confusion(tp, fp, fn, tn)), confusion_scores(tp, fp, fn, tn)
        for k, v in ref.items():
            assert abs(got[k] - v) < 1e-9


def test_invariants(rng):
    for _ in range(200):
        p, y = rng.integers(0, 2, 30), rng.integers(0, 2, 30)
        s = scores(confusion(p, y))
        assert 0.0 <= s["f1_macro"] <= 1.0
        c = confusion(p, y)
        assert s["accuracy"] == (c.tp + c.tn) / 30
        if s["recall_pos"] > s["precision_pos"] > 0:
            assert s["f2_pos"] > s["f1_pos"]
        if 0 < s["recall_pos"] < s["precision_pos"]:
            assert s["f2_pos"] < s["f1_pos"]
        t = scores(confusion(1 - p, 1 - y))
        assert t["f1_pos"] == pytest.approx(s["f1_neg"]) and t["f1_neg"] == pytest.approx(s["f1_pos"])
        assert t["f1_macro"] == pytest.approx(s["f1_macro"]) and t["accuracy"] == s["accuracy"]


@pytest.fixture(scope="module")
def trained():
    cfg = dict(steps=6, dim=8, seed=21)
    train = generate(SynthConfig(400, **cfg))
    test = generate(SynthConfig(200, start=400, **cfg))
    res = train_cascade(train, "mlp", k=2, seed=2, hidden=8)
    res.bundle.lam = 1
    return res.bundle, test


def test_evaluate_probe(trained):
    bundle, test = trained
    rep = evaluate(bundle.base, test)
    d = rep.to_dict()
    assert "routed_fraction" not in d and d["expected_params"] == param_count(bundle.base.spec)
    assert d["f1_macro"] == macro_f1(bundle.base.predict_states(test.states), test.labels)


def test_lambda_s_report_equals_base(trained):
    bundle, test = trained
    full = CascadeBundle(bundle.base, bundle.expert, bundle.tau, bundle.steps)
    a, b = evaluate(full, test), evaluate(bundle.base, test)
    for k in ("accuracy", "f1_macro", "f2_pos", "precision_pos", "recall_pos", "frr"):
        assert a.scores[k] == b.scores[k]
    assert a.routed_fraction == 0.0


def test_report_recount(trained, tmp_path):
    bundle, test = trained
    rep = evaluate(bundle, test)
    recs = classify_states(bundle, test.states).records()
    routed = [r for r in recs if r.routed]
    assert rep.routed_fraction == len(routed) / len(recs)
    assert rep.mean_window == pytest.approx(np.mean([r.window[1] - r.window[0] + 1 for r in routed]))
    assert rep.expected_params == expected_params(bundle, len(routed) / len(recs))
    correct = sum(int(r.final_label == y) for r, y in zip(recs, test.labels))
    assert rep.scores["accuracy"] == correct / len(recs)
    doc = json.loads(rep.to_json())
    assert {"accuracy", "f1_macro", "f2_pos", "precision_pos", "recall_pos", "frr", "routed_fraction",
            "expected_params", "expected_mflops"} <= set(doc)
    rep.routes.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "sample_id,n_tau,routed,window_lo,window_hi,base_label,final_label" and len(lines) == 201

import numpy as np
import pytest

from d2monitor.errors import ShapeMismatch
from d2monitor.normalize import NormStats
from d2monitor.probes import (
    Arch,
    Probe,
    ProbeSpec,
    Readout,
    attention_weights,
    baseline_table,
    bce_with_logits,
    flops_estimate,
    forward,
    gradient,
    init_weights,
    load_probe,
    logits,
    mv_labels,
    param_count,
    predict_with_readout,
    probe_from_bytes,
    probe_to_bytes,
    round_f32,
    save_probe,
    unpack,
)
from d2monitor.trajectory import Trajectory

from oracles import central_difference, max_rel_err, mlp_logit, mv_label

SMALL = dict(hidden=4, attn_dim=3, proj_dim=4, lstm_hidden=3)


def _batch(spec, r, n=3, D=5):
    if spec.takes_sequence:
        return [r.standard_normal((T, D)) for T in (2, 4, 4, 1)[:n]]
    return r.standard_normal((n, D))


@pytest.mark.parametrize("arch", list(Arch))
@pytest.mark.parametrize("point", range(5))
def test_gradient_matches_finite_differences(arch, point):
    spec = ProbeSpec(arch, 5, **SMALL)
    r = np.random.default_rng(100 + point)
    w = init_weights(spec, point) + 0.1 * r.standard_normal(param_count(spec))
    X = _batch(spec, r)
    y = np.array([0.0, 1.0, 1.0])
    _, g = gradient(spec, w, X, y)
    num = central_difference(lambda v: gradient(spec, v, X, y)[0], w, 1e-5)
    assert max_rel_err(g, num) < 1e-4


@pytest.mark.parametrize("arch", [Arch.MLP, Arch.TIMEATTN, Arch.LSTM])
def test_gradient_with_fixed_dropout_mask(arch):
    spec = ProbeSpec(arch, 5, dropout=0.3, **SMALL)
    r = np.random.default_rng(7)
    w = init_weights(spec, 1)
    X = _batch(spec, r)
    y = np.array([1.0, 0.0, 1.0])
    _, g = gradient(spec, w, X, y, rng_seed=99)
    num = central_difference(lambda v: gradient(spec, v, X, y, rng_seed=99)[0], w, 1e-5)
    assert max_rel_err(g, num) < 1e-4


def test_lp_zero_weights():
    spec = ProbeSpec(Arch.LP, 4)
    w = np.zeros(5)
    w[-1] = 0.3
    assert forward(spec, w, np.random.default_rng(0).standard_normal(4)) == pytest.approx(0.3)


def test_timeattn_uniform_on_constant_steps():
    spec = ProbeSpec(Arch.TIMEATTN, 6, **SMALL)
    h = np.random.default_rng(1).standard_normal(6)
    a = attention_weights(spec, init_weights(spec, 3), np.tile(h, (5, 1)))
    np.testing.assert_allclose(a, 0.2, atol=1e-12)


def test_mlp_forward_vs_dense_arithmetic():
    spec = ProbeSpec(Arch.MLP, 6, hidden=5)
    r = np.random.default_rng(2)
    w = r.standard_normal(param_count(spec))
    P = unpack(spec, w)
    names = list(P)
    W_in, b_in, W_out, b_out = (P[n] for n in names)
    for _ in range(20):
        x = r.standard_normal(6)
        ref = mlp_logit(W_in.tolist(), b_in.tolist(), np.ravel(W_out).tolist(), float(np.ravel(b_out)[0]), x.tolist())
        assert forward(spec, w, x) == pytest.approx(ref, abs=1e-5)


def test_forward_shape_mismatch():
    spec = ProbeSpec(Arch.LSTM, 4, **SMALL)
    with pytest.raises(ShapeMismatch):
        forward(spec, init_weights(spec, 0), np.zeros(4))


def test_eval_mode_is_deterministic():
    for arch in Arch:
        spec = ProbeSpec(arch, 5, dropout=0.5, **SMALL)
        r = np.random.default_rng(3)
        X = _batch(spec, r)
        w = init_weights(spec, 4)
        a = logits(spec, w, X)
        b = logits(spec, w, X)
        assert a.tobytes() == b.tobytes()


def test_bce_at_zero_logit():
    np.testing.assert_allclose(bce_with_logits(np.zeros(2), np.array([0, 1])), np.log(2))


def test_stationary_point_zero_grad():
    spec = ProbeSpec(Arch.LP, 3)
    x = np.array([[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]])
    loss, g = gradient(spec, np.zeros(4), np.vstack([x, x]), np.array([1, 0, 0, 1]))
    np.testing.assert_allclose(g[:3], 0, atol=1e-15)
    assert loss == pytest.approx(np.log(2))


# ---------------------------------------------------------------- readouts

def _lp_probe(r, D=4, S=4, readout=Readout.MV):
    spec = ProbeSpec(Arch.LP, D, readout=readout)
    return Probe(spec, r.standard_normal(D + 1), None, S)


def test_mv_rules():
    assert mv_labels(np.array([[0.1, 0.2, 3.0]]))[0] == 1
    assert mv_labels(np.array([[1.0, 1.0, -1.0, -1.0]]))[0] == 1
    assert mv_labels(np.array([[1.0, -1.0, -1.0, -1.0]]))[0] == 0
    assert mv_labels(np.array([[0.0, 0.0]]))[0] == 0


def test_mv_vs_step_loop():
    r = np.random.default_rng(5)
    probe = _lp_probe(r, D=6, S=7)
    states = r.standard_normal((500, 7, 6))
    labels = probe.predict_states(states)
    w, b = probe.weights[:-1], probe.weights[-1]
    for i in range(500):
        ref = mv_label([float(states[i, s] @ w + b) for s in range(7)])
        assert labels[i] == ref


def test_predict_with_readout_variants():
    r = np.random.default_rng(6)
    t = Trajectory(r.standard_normal((4, 3)))
    w = r.standard_normal(4)
    last = Probe(ProbeSpec(Arch.LP, 3, readout=Readout.LAST), w, None, 4)
    mean = Probe(ProbeSpec(Arch.LP, 3, readout=Readout.MEAN), w, None, 4)
    mv = Probe(ProbeSpec(Arch.LP, 3, readout=Readout.MV), w, None, 4)
    assert predict_with_readout(last, t)[0] == int(t.states[-1] @ w[:3] + w[3] > 0)
    assert predict_with_readout(mean, t)[0] == int(t.states.mean(0) @ w[:3] + w[3] > 0)
    label, d = predict_with_readout(mv, t)
    np.testing.assert_allclose(d, t.states @ w[:3] + w[3])
    assert label == mv_label(d)
    win, _ = predict_with_readout(mean, t, span=(1, 2))
    assert win == int(t.states[1:3].mean(0) @ w[:3] + w[3] > 0)


def test_rescaling_keeps_labels():
    r = np.random.default_rng(8)
    states = r.standard_normal((50, 5, 4))
    for readout in (Readout.MV, Readout.MEAN, Readout.LAST):
        p = _lp_probe(r, readout=readout, S=5)
        q = Probe(p.spec, p.weights * 3.7, None, 5)
        np.testing.assert_array_equal(p.predict_states(states), q.predict_states(states))


# ---------------------------------------------------------------- counts

def test_param_counts():
    assert param_count(ProbeSpec(Arch.LP, 4096)) == 4097
    assert param_count(ProbeSpec(Arch.MLP, 4096)) == 1_049_089
    lstm = param_count(ProbeSpec(Arch.LSTM, 4096))
    assert abs(lstm - 2.57e6) / 2.57e6 < 0.02


def test_param_count_matches_layout():
    for arch in Arch:
        spec = ProbeSpec(arch, 5, **SMALL)
        assert sum(v.size for v in unpack(spec, np.zeros(param_count(spec))).values()) == param_count(spec)


def test_flops_examples():
    assert flops_estimate(ProbeSpec(Arch.LP, 4096, readout=Readout.MV), 32) == 262_144
    assert flops_estimate(ProbeSpec(Arch.LP, 4096, readout=Readout.LAST), 7) == 8192
    lstm = flops_estimate(ProbeSpec(Arch.LSTM, 2048), 128) / 1e6
    assert abs(lstm - 386) / 386 < 0.02 and lstm == pytest.approx(385.9, abs=0.1)


def test_flops_formulas():
    S, D, K, da = 32, 4096, 256, 128
    f = {
        (Arch.LP, Readout.LAST): 2 * D, (Arch.LP, Readout.MEAN): S * D + 2 * D, (Arch.LP, Readout.MV): 2 * S * D,
        (Arch.MLP, Readout.LAST): 2 * D * K, (Arch.MLP, Readout.MEAN): S * D + 2 * D * K,
        (Arch.MLP, Readout.MV): 2 * S * D * K,
    }
    for (arch, readout), want in f.items():
        assert flops_estimate(ProbeSpec(arch, D, readout=readout), S) == want
    ta = ProbeSpec(Arch.TIMEATTN, D)
    assert flops_estimate(ta, S) == 2 * S * D * da + 2 * S * D + 2 * D * K
    assert flops_estimate(ta, S, dominant_only=True) == 2 * S * D * da + 2 * D * K


def test_baseline_table_rows():
    rows = baseline_table(32, 4096)
    assert [r["method"] for r in rows][0] == "LP (Last Step)" and len(rows) == 8


# ---------------------------------------------------------------- files

@pytest.mark.parametrize("arch", list(Arch))
def test_probe_file_round_trip(tmp_path, arch):
    spec = ProbeSpec(arch, 5, dropout=0.2, **SMALL)
    r = np.random.default_rng(9)
    stats = NormStats("per_feature", round_f32(r.standard_normal(5)), round_f32(r.random(5) + 0.5))
    probe = Probe(spec, round_f32(init_weights(spec, 2)), stats, 16)
    save_probe(probe, tmp_path / "p.d2p")
    back = load_probe(tmp_path / "p.d2p")
    assert back.spec == spec and back.steps_trained == 16
    assert back.weights.tobytes() == probe.weights.tobytes()
    assert back.stats.mean.tobytes() == stats.mean.tobytes()
    assert probe_to_bytes(back) == (tmp_path / "p.d2p").read_bytes()
    assert probe_from_bytes(probe_to_bytes(probe)).spec == spec


def test_probe_bad_magic():
    from d2monitor.errors import BadMagic

    spec = ProbeSpec(Arch.LP, 2)
    raw = probe_to_bytes(Probe(spec, np.zeros(3), None, 1))
    with pytest.raises(BadMagic):
        probe_from_bytes(b"NOTAPROB" + raw[8:])

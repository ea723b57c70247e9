import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import check_op_gradients, fd_gradient, rel_error
from tasks import TASK_CONFIG, task_segments
from uncer import tensor as T
from uncer.augment import (CORRUPTIONS, AugmentConfig, Controller, ControllerState, CorruptionOp, MixDecision, all_ops,
                           apply_corruption, build_chain, build_controller, controller_forward, controller_step,
                           corrupt_set, inner_update, js_consistency, js_logits, meta_update, mix, mix_tensor,
                           split_ops, train_uncer)
from uncer.augment.corruptions import GAUSS_SIGMA, gain
from uncer.augment.train import augmented_loss, meta_loss_tensor
from uncer.decoder import build_decoder, embed, forward, sgd_step, train
from uncer.io import FormatError
from uncer.optim import AdamState
from uncer.rng import RngStream
from uncer.tensor import ShapeError, Tape, Tensor

# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("severity", range(1, 6))
def test_gaussian_noise_variance(severity):
    out = apply_corruption(CorruptionOp("gaussian_noise", severity), np.zeros((10, 10_000)), RngStream(severity))
    assert abs(out.var() / GAUSS_SIGMA[severity - 1] ** 2 - 1) < 0.05


@pytest.mark.parametrize("severity", range(1, 6))
def test_intensity_is_pure_rescale(severity):
    x = np.random.default_rng(0).normal(size=(4, 50))
    for seed in range(4):
        out = apply_corruption(CorruptionOp("intensity", severity), x, RngStream(seed))
        g = out[0, 0] / x[0, 0]
        assert g in (gain(severity, 1.0), gain(severity, -1.0))
        assert np.array_equal(out, g * x)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_severity_monotone(kind):
    r = np.random.default_rng(1)
    for i in range(100):
        x = r.normal(size=(8, 64))
        lo = apply_corruption(CorruptionOp(kind, 1), x, RngStream(i))
        hi = apply_corruption(CorruptionOp(kind, 5), x, RngStream(i))
        assert np.linalg.norm(hi - x) >= np.linalg.norm(lo - x)


@pytest.mark.parametrize("kind", CORRUPTIONS + ("identity",))
def test_shape_and_determinism(kind):
    x = np.random.default_rng(2).normal(size=(3, 5, 40))
    op = CorruptionOp(kind, 3)
    a = apply_corruption(op, x, RngStream(4))
    b = apply_corruption(op, x, RngStream(4))
    assert a.shape == x.shape and np.array_equal(a, b)


def test_corruption_errors():
    with pytest.raises(ValueError):
        CorruptionOp("fog", 1)
    for sev in (0, 6, 2.5):
        with pytest.raises(ValueError):
            CorruptionOp("contrast", sev)
    with pytest.raises(ValueError):
        apply_corruption(CorruptionOp("contrast", 1), np.zeros(5), RngStream(0))


def test_corrupt_set_keeps_labels():
    seg = task_segments(0, trials=8)
    out = corrupt_set(seg, CorruptionOp("impulse_noise", 4), RngStream(0))
    assert np.array_equal(out.labels, seg.labels) and out.segments.shape == seg.segments.shape
    assert not np.array_equal(out.segments, seg.segments)


def test_all_ops():
    ops = all_ops()
    assert len(ops) == 8 and {o.kind for o in ops} == set(CORRUPTIONS)
    assert all(o.severity == 3 for o in ops)


# ---------------------------------------------------------------------------
# split, chains, mixing
# ---------------------------------------------------------------------------


def test_split_default_and_partition():
    ops = all_ops()
    for seed in range(50):
        seen, unseen = split_ops(ops, AugmentConfig().seen_count, RngStream(seed))
        assert len(seen) == 6 and len(unseen) == 2
        assert set(seen) | set(unseen) == set(ops) and not set(seen) & set(unseen)


def test_split_unseen_frequency():
    ops = all_ops()
    counts = {o: 0 for o in ops}
    for seed in range(1000):
        for o in split_ops(ops, 6, RngStream(seed))[1]:
            counts[o] += 1
    assert all(abs(c / 1000 - 0.25) <= 0.05 for c in counts.values())


@pytest.mark.parametrize("count", [0, 8, -1])
def test_split_invalid(count):
    with pytest.raises(ValueError):
        split_ops(all_ops(), count, RngStream(0))


def test_chain_lengths():
    seen = all_ops()[:3]
    assert all(len(build_chain(seen, 1, RngStream(i))) == 1 for i in range(200))
    lengths = np.array([len(build_chain(seen, 3, RngStream(i))) for i in range(10_000)])
    freq = np.bincount(lengths, minlength=4)[1:] / len(lengths)
    assert np.all(np.abs(freq - 1 / 3) <= 0.03)


def test_chains_only_use_seen_ops():
    seen, unseen = split_ops(all_ops(), 6, RngStream(3))
    for i in range(500):
        assert not set(build_chain(seen, 3, RngStream(i))) & set(unseen)


def test_chain_errors():
    with pytest.raises(ValueError):
        build_chain([], 3, RngStream(0))
    with pytest.raises(ValueError):
        build_chain(all_ops(), 0, RngStream(0))


def test_mix_examples():
    r = np.random.default_rng(4)
    x = r.normal(size=(2, 3, 10))
    chains = [r.normal(size=x.shape) for _ in range(3)]
    assert np.array_equal(mix(x, chains, MixDecision([0.2, 0.3, 0.5], 1.0)), x)
    assert np.array_equal(mix(x, chains, MixDecision([0, 1, 0], 0.0)), chains[1])
    with pytest.raises(ValueError):
        mix(x, chains[:2], MixDecision([0.2, 0.3, 0.5], 0.5))


@given(st.integers(1, 4).flatmap(lambda w: st.tuples(
    hnp.arrays(np.float64, (w + 1, 2, 5), elements=st.floats(-10, 10)),
    hnp.arrays(np.float64, (w,), elements=st.floats(0.01, 1)),
    st.floats(0, 1))))
def test_mix_convex_hull(data):
    arrays, raw_w, m = data
    w = raw_w / raw_w.sum()
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    out = mix(arrays[0], list(arrays[1:]), MixDecision(w, m))
    tol = 1e-9 * (1 + np.abs(arrays).max())
    assert np.all(out >= arrays.min(axis=0) - tol) and np.all(out <= arrays.max(axis=0) + tol)


def test_mix_tensor_matches_mix():
    r = np.random.default_rng(5)
    x = r.normal(size=(2, 3, 10))
    chains = [r.normal(size=x.shape) for _ in range(3)]
    d = MixDecision([0.2, 0.3, 0.5], 0.4)
    out = mix_tensor(x, chains, Tensor(d.w), Tensor(np.array([d.m])))
    assert np.array_equal(out.data, mix(x, chains, d))
    with pytest.raises(ShapeError):
        mix_tensor(x, chains[:2], Tensor(d.w), Tensor(np.array([d.m])))


def test_mix_decision_validation():
    with pytest.raises(ValueError):
        MixDecision([0.5, 0.6], 0.5)
    with pytest.raises(ValueError):
        MixDecision([1.2, -0.2], 0.5)
    with pytest.raises(ValueError):
        MixDecision([0.5, 0.5], 1.5)


# ---------------------------------------------------------------------------
# JS consistency
# ---------------------------------------------------------------------------


def test_js_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert js_consistency(p, p) == 0.0
    assert js_consistency([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.log(2), abs=1e-12)


dists = hnp.arrays(np.float64, (4,), elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3).map(
    lambda a: a / a.sum())


@given(dists, dists)
def test_js_properties(p, q):
    a = js_consistency(p, q)
    assert a == pytest.approx(js_consistency(q, p), abs=1e-15)
    assert -1e-15 <= a <= np.log(2) + 1e-12
    if np.array_equal(p, q):
        assert abs(a) <= 1e-12
    elif np.abs(p - q).max() > 1e-3:
        assert a > 0


def test_js_invalid():
    with pytest.raises(ValueError):
        js_consistency([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        js_consistency([1.5, -0.5], [0.5, 0.5])


def test_js_logits_value_and_gradient():
    r = np.random.default_rng(6)
    a, b = r.normal(size=(5, 4)), r.normal(size=(5, 4))
    from scipy.special import softmax

    val = js_logits(Tensor(a), Tensor(b)).item()
    assert val == pytest.approx(js_consistency(softmax(a, axis=1), softmax(b, axis=1)).mean())
    errs = check_op_gradients(lambda x, y: js_logits(x, y), [a, b], weights=np.ones(1))
    assert max(errs) < 1e-6


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------


def test_config_defaults_and_errors():
    cfg = AugmentConfig()
    assert (cfg.width, cfg.depth, cfg.inner_steps, cfg.inner_lr, cfg.lam, cfg.seen_count) == (3, 3, 1, 1e-3, 15.0, 6)
    for bad in (dict(width=0), dict(depth=0), dict(inner_steps=0), dict(lam=-1), dict(seen_count=0),
                dict(severity=6)):
        with pytest.raises(ValueError):
            AugmentConfig(**bad)


def test_zero_head_gives_uniform_decision():
    ctrl = build_controller(8, 16, 3, RngStream(0))
    d, nxt = controller_step(ctrl, ctrl.initial_state(), np.ones(8))
    assert np.allclose(d.w, 1 / 3, atol=1e-15) and d.m == 0.5
    assert nxt.h.shape == nxt.c.shape == (1, 16)


def randomize(ctrl, seed):
    r = np.random.default_rng(seed)
    for p in ctrl.parameters():
        p.data[...] = r.normal(0, 0.5, p.shape)
    return ctrl


@given(st.integers(0, 10_000))
def test_decision_constraints_random_params(seed):
    ctrl = randomize(build_controller(5, 6, 4, RngStream(0)), seed)
    state = ctrl.initial_state()
    r = np.random.default_rng(seed)
    for _ in range(3):
        d, state = controller_step(ctrl, state, r.normal(size=5))
        assert abs(d.w.sum() - 1) <= 1e-9 and np.all(d.w >= 0) and 0 <= d.m <= 1


def test_controller_gradient_matches_finite_differences():
    ctrl = randomize(build_controller(5, 4, 3, RngStream(0)), 1)
    r = np.random.default_rng(2)
    state = ControllerState(r.normal(size=(1, 4)), r.normal(size=(1, 4)))
    emb = r.normal(size=5)
    a, b = r.normal(size=3), 1.7

    def scalar():
        w, m, h, c = controller_forward(ctrl, state, emb)
        return T.add(T.add(T.tensor_sum(T.mul(w, Tensor(a))), T.mul(T.tensor_sum(m), b)),
                     T.add(T.tensor_sum(h), T.tensor_sum(c)))

    params = ctrl.parameters()
    with Tape() as tape:
        grads = T.grad(scalar(), params, tape)
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.data.copy()
            p.data[...] = v
            with T.no_grad():
                out = scalar().item()
            p.data[...] = old
            return out

        assert rel_error(g, fd_gradient(f, p.data.copy(), 1e-5)) < 1e-4


def test_controller_dimension_errors():
    ctrl = build_controller(5, 4, 3, RngStream(0))
    with pytest.raises(ShapeError):
        controller_step(ctrl, ctrl.initial_state(), np.ones(6))
    with pytest.raises(ShapeError):
        controller_step(ctrl, ControllerState(np.zeros((1, 3)), np.zeros((1, 3))), np.ones(5))
    with pytest.raises(ShapeError):
        ControllerState(np.zeros((1, 3)), np.zeros((1, 4)))


def test_controller_checkpoint(tmp_path):
    ctrl = randomize(build_controller(5, 4, 3, RngStream(0)), 3)
    ctrl.save(tmp_path / "c.bin")
    back = Controller.load(tmp_path / "c.bin")
    assert (back.embedding_dim, back.hidden_dim, back.width) == (5, 4, 3)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(ctrl.parameters(), back.parameters()))
    model = build_decoder(TASK_CONFIG, RngStream(0))
    model.save(tmp_path / "m.bin")
    with pytest.raises(FormatError):
        Controller.load(tmp_path / "m.bin")


# ---------------------------------------------------------------------------
# inner and meta updates
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def batch():
    seg = task_segments(0, trials=16)
    return seg.segments[:24], seg.labels[:24]


def fresh_model(seed=0):
    return build_decoder(TASK_CONFIG, RngStream(seed).child("init"))


def mixed_batch(x, seed):
    seen, _ = split_ops(all_ops(), 6, RngStream(seed))
    from uncer.augment import chain_outputs

    chains = chain_outputs(seen, x, 3, 3, RngStream(seed).child("chains"))
    return mix(x, chains, MixDecision([0.5, 0.3, 0.2], 0.4))


def test_inner_descent_small_step(batch):
    x, y = batch
    ok = 0
    for seed in range(20):
        model = fresh_model(seed)
        xm = mixed_batch(x, seed)
        # streams are consumed as they draw, so every evaluation gets a fresh copy (same dropout mask)
        s = lambda: RngStream(seed).child("dropout")
        model.train()
        before = augmented_loss(model, xm, x, y, 15.0, s()).item()
        inner_update(model, AdamState.for_params(model.parameters()), xm, x, y, 15.0, 1e-4, 1, s())
        model.train()
        after = augmented_loss(model, xm, x, y, 15.0, s()).item()
        ok += after <= before
    assert ok >= 18


def test_inner_update_lambda0_is_plain_step(batch):
    x, y = batch
    xm = mixed_batch(x, 0)
    a, b = fresh_model(), fresh_model()
    inner_update(a, AdamState.for_params(a.parameters()), xm, x, y, 0.0, 1e-3, 1, RngStream(5))
    sgd_step(b, AdamState.for_params(b.parameters()), xm, y, 1e-3, RngStream(5))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_inner_update_errors(batch):
    x, y = batch
    model = fresh_model()
    with pytest.raises(ValueError):
        inner_update(model, AdamState.for_params(model.parameters()), x, x, y, 0.0, 1e-3, 0, RngStream(0))


def test_meta_update_roles(batch):
    x, y = batch
    model = fresh_model()
    model.eval()
    ctrl = randomize(build_controller(TASK_CONFIG.pointwise_filters, 16, 3, RngStream(0)), 4)
    dec_before = model.state_arrays()
    ctrl_before = [p.data.copy() for p in ctrl.parameters()]
    _, unseen = split_ops(all_ops(), 6, RngStream(1))
    from uncer.augment import chain_outputs

    chains = chain_outputs(unseen, x, 3, 3, RngStream(2))
    meta_update(ctrl, AdamState.for_params(ctrl.parameters()), ctrl.initial_state(), embed(model, x), model, x, y,
                chains, 15.0, 1e-3)
    after = model.state_arrays()
    assert all(np.array_equal(dec_before[k], after[k]) for k in dec_before)
    assert any(not np.array_equal(a, p.data) for a, p in zip(ctrl_before, ctrl.parameters()))


def test_meta_loss_identity_ops_is_cross_entropy(batch):
    x, y = batch
    model = fresh_model()
    model.eval()
    ctrl = randomize(build_controller(TASK_CONFIG.pointwise_filters, 16, 3, RngStream(0)), 5)
    chains = [x.copy() for _ in range(3)]
    loss = meta_loss_tensor(ctrl, ctrl.initial_state(), embed(model, x), model, x, y, chains, 0.0).item()
    ce = T.cross_entropy(forward(model, x), y).item()
    assert loss == pytest.approx(ce, rel=1e-12)


def test_meta_gradient_matches_finite_differences(batch):
    x, y = batch
    x, y = x[:8], y[:8]
    model = fresh_model(1)
    model.eval()
    ctrl = randomize(build_controller(TASK_CONFIG.pointwise_filters, 6, 3, RngStream(0)), 6)
    state = ctrl.initial_state()
    emb = embed(model, x)
    _, unseen = split_ops(all_ops(), 6, RngStream(1))
    from uncer.augment import chain_outputs

    chains = chain_outputs(unseen, x, 3, 3, RngStream(3))
    params = ctrl.parameters()
    for p in model.parameters():
        p.requires_grad = False
    try:
        with Tape() as tape:
            grads = T.grad(meta_loss_tensor(ctrl, state, emb, model, x, y, chains, 15.0), params, tape)
        for p, g in zip(params, grads):
            def f(v, p=p):
                old = p.data.copy()
                p.data[...] = v
                with T.no_grad():
                    out = meta_loss_tensor(ctrl, state, emb, model, x, y, chains, 15.0).item()
                p.data[...] = old
                return out

            assert rel_error(g, fd_gradient(f, p.data.copy(), 1e-5)) < 1e-3
    finally:
        for p in model.parameters():
            p.requires_grad = True


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------


def test_train_uncer_deterministic_and_history():
    seg = task_segments(2, trials=16)
    runs = []
    for _ in range(2):
        model = fresh_model(2)
        model, ctrl, hist = train_uncer(model, None, seg, AugmentConfig(inner_lr=3e-3), epochs=2,
                                        stream=RngStream(9), batch_size=16)
        runs.append((model.state_arrays(), [p.data.copy() for p in ctrl.parameters()], hist))
    (a, ca, ha), (b, cb, hb) = runs
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(np.array_equal(p, q) for p, q in zip(ca, cb))
    assert len(ha) == 2 and ha.train_loss == hb.train_loss and np.all(np.isfinite(ha.meta_loss))
    assert all(abs(sum(w) - 1) < 1e-9 for w in ha.mix_w) and all(0 <= m <= 1 for m in ha.mix_m)


def test_train_uncer_joint_variant_runs():
    seg = task_segments(2, trials=8)
    model, ctrl, hist = train_uncer(fresh_model(2), None, seg, AugmentConfig(), epochs=1, stream=RngStream(0),
                                    batch_size=16, variant="joint")
    assert len(hist) == 1 and np.isnan(hist.meta_loss[0]) and model.mode == "eval"


def test_train_uncer_errors():
    seg = task_segments(2, trials=8)
    with pytest.raises(ValueError):
        train_uncer(fresh_model(), None, seg, epochs=1, variant="other")
    with pytest.raises(ValueError):
        train_uncer(fresh_model(), None, seg, epochs=1, ops=all_ops()[:3])
    with pytest.raises(ValueError):
        train_uncer(fresh_model(), build_controller(3, 4, 3, RngStream(0)), seg, epochs=1)


def test_identity_ops_lambda0_trajectory_equals_plain_training():
    seg = task_segments(4, trials=16)
    ops = [CorruptionOp("identity", 1)] * 8
    a, _, _ = train_uncer(fresh_model(4), None, seg, AugmentConfig(lam=0.0, inner_lr=3e-3), epochs=3,
                          stream=RngStream(11), ops=ops, batch_size=16)
    b, _ = train(fresh_model(4), seg, None, epochs=3, lr=3e-3, batch_size=16, stream=RngStream(11))
    sa, sb = a.state_arrays(), b.state_arrays()
    # mixing identical copies reproduces the batch only up to rounding of m*x + (1-m)*sum(w_i*x)
    assert max(np.abs(sa[k] - sb[k]).max() for k in sa) < 1e-8

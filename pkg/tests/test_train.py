import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_dataset
from mmcsg import tensor as T
from mmcsg.model import NumericError, init_params, model_forward_backward
from mmcsg.train import (AdamState, ConsistencyError, TrainConfig, adam_step, batch_gradients,
                         central_difference, clip_by_global_norm, global_norm, grad_check,
                         relative_error, tiny_config, train)


def test_adam_zero_gradient_is_fixed_point():
    params = {"w": np.array([[1.0, -2.0]])}
    state = AdamState()
    params, state = adam_step(params, {"w": np.zeros((1, 2))}, state, TrainConfig(learning_rate=0.1))
    np.testing.assert_array_equal(params["w"], [[1.0, -2.0]])
    assert not state.m["w"].any() and not state.v["w"].any()


def test_adam_first_step_is_signed_lr():
    g = np.array([[0.3, -4.0, 1e-3]])
    params = {"w": np.zeros((1, 3))}
    params, _ = adam_step(params, {"w": g}, AdamState(), TrainConfig(learning_rate=0.01))
    np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_second_step_by_hand():
    tc = TrainConfig(learning_rate=0.1)
    params, state = {"w": np.array([[0.0]])}, AdamState()
    params, state = adam_step(params, {"w": np.array([[1.0]])}, state, tc)
    params, state = adam_step(params, {"w": np.array([[-1.0]])}, state, tc)
    m = 0.9 * 0.1 + 0.1 * -1.0
    v = 0.999 * 0.001 + 0.001
    step = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    first = -0.1 * 1.0 / (1.0 + 1e-8)
    assert params["w"][0, 0] == pytest.approx(first - 0.1 * step, abs=1e-15)


def test_adam_consistency_errors():
    tc = TrainConfig()
    with pytest.raises(ConsistencyError, match="no gradient"):
        adam_step({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.zeros(1)}, AdamState(), tc)
    with pytest.raises(ConsistencyError, match="unknown"):
        adam_step({"a": np.zeros(1)}, {"a": np.zeros(1), "c": np.zeros(1)}, AdamState(), tc)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(target="nurse")


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
def test_clipping_never_increases_norm(seed, limit):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 2)) * rng.uniform(0, 5), "b": rng.normal(size=(1, 4))}
    clipped, before = clip_by_global_norm(grads, limit)
    after = global_norm(clipped)
    assert before == pytest.approx(global_norm(grads))
    assert after <= before + 1e-12
    assert after <= limit * (1 + 1e-12) or after == before


def test_clipping_example():
    clipped, norm = clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.8], rtol=1e-15)


def test_x_squared_probe():
    x = np.array([3.0])
    assert central_difference(lambda v: float(v[0] ** 2), x, (0,)) == pytest.approx(6.0, abs=1e-8)
    t = T.parameter([[3.0]])
    with T.Tape() as tape:
        out = T.sum_all(T.mul(t, t))
    assert tape.gradient(out, [t])[0][0, 0] == 6.0
    assert relative_error(6.0, 6.0) == 0.0
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)


@pytest.fixture(scope="module")
def data():
    return small_dataset(40, seed=0)


def test_epochs_zero_is_noop(data):
    cfg, tr, va, _, _ = data
    params = init_params(cfg)
    out, log = train(cfg, params, tr, va, TrainConfig(epochs=0))
    assert log == []
    assert all(np.array_equal(out[k], params[k]) for k in params)


def test_loss_accounting_and_logging(data):
    cfg, tr, va, _, _ = data
    _, log = train(cfg, init_params(cfg), tr, va, TrainConfig(epochs=1, batch_size=8,
                                                               learning_rate=1e-3))
    steps = [r for r in log if "step" in r]
    assert len(steps) == 4 and [r["step"] for r in steps] == [1, 2, 3, 4]
    for r in steps:
        assert abs(r["L"] - (0.2 * r["CL"] + 0.8 * r["GL"])) < 1e-12
    epoch = log[-1]
    assert set(epoch) == {"epoch", "mean_L", "mean_CL", "mean_GL", "val_intent_acc",
                          "val_token_f1"}
    assert epoch["mean_L"] == pytest.approx(np.mean([r["L"] for r in steps]), abs=1e-12)


def test_single_task_freezes_intent_head(data):
    cfg, tr, va, _, _ = data
    cfg = type(cfg)(**{**cfg.to_dict(), "modalities": cfg.modalities,
                       "loss_alpha1": 0.0, "loss_alpha2": 1.0})
    params = init_params(cfg)
    out, log = train(cfg, params, tr, va, TrainConfig(epochs=1, batch_size=8, learning_rate=1e-2))
    for k in ("intent.W", "intent.b"):
        assert np.array_equal(out[k], params[k])
    assert not np.array_equal(out["lm.W"], params["lm.W"])
    assert all(r["L"] == r["GL"] for r in log if "step" in r)


def test_training_is_bit_reproducible(data):
    cfg, tr, va, _, _ = data
    tc = TrainConfig(epochs=1, batch_size=8, learning_rate=1e-3, seed=5)
    a, la = train(cfg, init_params(cfg), tr, va, tc)
    b, lb = train(cfg, init_params(cfg), tr, va, tc)
    assert la == lb and all(np.array_equal(a[k], b[k]) for k in a)


def test_overfit_fixture_loss_falls(data):
    cfg, tr, _, _, _ = data
    batch = tr[:4]
    tc = TrainConfig(epochs=5, batch_size=4, learning_rate=3e-3)
    _, log = train(cfg, init_params(cfg), batch, [], tc)
    epochs = [r for r in log if "mean_L" in r]
    assert epochs[4]["mean_L"] < epochs[0]["mean_L"]


def test_batch_gradient_is_mean_of_examples(data):
    cfg, tr, _, _, _ = data
    params = init_params(cfg)
    L, _, _, grads = batch_gradients(tr[:2], params, cfg)
    r0, r1 = (model_forward_backward(b, params, cfg) for b in tr[:2])
    assert L == pytest.approx((r0.L + r1.L) / 2, abs=1e-15)
    np.testing.assert_allclose(grads["lm.W"], (r0.grads["lm.W"] + r1.grads["lm.W"]) / 2,
                               rtol=1e-15, atol=1e-18)


def test_nan_parameter_aborts_with_name(data):
    cfg, tr, _, _, _ = data
    params = init_params(cfg)
    params["enc.0.ffn.W1"][0, 0] = np.nan
    with pytest.raises(NumericError, match="enc.0.ffn.W1"):
        model_forward_backward(tr[0], params, cfg)


def test_grad_check_tiny_model_passes():
    report = grad_check(tiny_config(), tolerance=1e-4)
    assert report.passed, report.failures
    assert len(report.lines()) == len(report.max_rel_error)


def test_grad_check_flags_corrupted_rule(monkeypatch):
    original = T.VJP_RULES["embedding"]
    monkeypatch.setitem(T.VJP_RULES, "embedding", lambda g, n: (1.5 * original(g, n)[0],))
    report = grad_check(tiny_config(), tolerance=1e-4, trials=5)
    assert report.failures == ["embed.tokens"]


def test_grad_check_impossible_tolerance_fails():
    report = grad_check(tiny_config(), tolerance=1e-12, trials=3)
    assert not report.passed

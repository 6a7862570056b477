import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmcsg import tensor as T
from mmcsg.model import (BOS, EOS, PAD, InputError, ModelConfig, as_tensors, decoder_forward,
                         encoder_forward, greedy_decode, init_params, intent_logits, joint_loss,
                         model_forward_backward, param_shapes)
from mmcsg.train import probe_bundle, tiny_config


@pytest.fixture(scope="module")
def tiny():
    cfg = tiny_config()
    return cfg, init_params(cfg)


def vectors(cfg, seed=0):
    rng = np.random.default_rng(seed)
    p = np.zeros((1, 8))
    p[0, 1] = p[0, 4] = 1.0
    return {"audio": rng.normal(size=(1, cfg.d_audio)), "visual": rng.normal(size=(1, cfg.d_visual)),
            "personal": p}


def test_encoder_shapes(tiny):
    cfg, params = tiny
    H, H_hat, trace = encoder_forward([BOS, 5, 6, EOS], vectors(cfg), as_tensors(params), cfg)
    assert H.shape == H_hat.shape == (4, 8)
    assert not trace.truncated


def test_all_pad_source_rejected(tiny):
    cfg, params = tiny
    with pytest.raises(InputError, match="empty source"):
        encoder_forward([PAD, PAD], vectors(cfg), as_tensors(params), cfg)


def test_out_of_range_source_rejected(tiny):
    cfg, params = tiny
    with pytest.raises(InputError):
        encoder_forward([BOS, cfg.vocab_size], vectors(cfg), as_tensors(params), cfg)


def test_long_source_truncated(tiny):
    cfg, params = tiny
    H, _, trace = encoder_forward([BOS] + [5] * 40, vectors(cfg), as_tensors(params), cfg)
    assert trace.truncated and H.shape[0] == cfg.max_src_len


def test_fusion_off_is_identity(tiny):
    cfg, params = tiny
    H, H_hat, _ = encoder_forward([BOS, 7, EOS], vectors(cfg), as_tensors(params), cfg,
                                  use_fusion=False)
    assert H_hat is H


def test_disabled_modalities_match_text_only(tiny):
    cfg, params = tiny
    off = tiny_config(modalities=())
    P = as_tensors(params)
    _, a, _ = encoder_forward([BOS, 7, 9, EOS], vectors(cfg), P, off)
    _, b, _ = encoder_forward([BOS, 7, 9, EOS], vectors(cfg), P, cfg, use_fusion=False)
    assert np.array_equal(a.data, b.data)


def test_intent_logits_zero_input_gives_bias(tiny):
    cfg, params = tiny
    P = as_tensors(params)
    P["intent.b"] = T.constant(np.arange(7.0)[None, :])
    out = intent_logits(T.constant(np.zeros((5, 8))), np.zeros(5, dtype=bool), P)
    np.testing.assert_array_equal(out.data, P["intent.b"].data)


def test_intent_pooling_single_position(tiny):
    cfg, params = tiny
    P = as_tensors(params)
    rng = np.random.default_rng(1)
    Hh = rng.normal(size=(4, 8))
    mask = np.array([True, False, True, True])
    out = intent_logits(T.constant(Hh), mask, P)
    expected = Hh[1:2] @ params["intent.W"] + params["intent.b"]
    np.testing.assert_allclose(out.data, expected, rtol=1e-13)


def test_intent_pooling_loop_oracle(tiny):
    cfg, params = tiny
    rng = np.random.default_rng(2)
    Hh = rng.normal(size=(6, 8))
    mask = np.array([False, False, True, False, True, False])
    keep = [i for i in range(6) if not mask[i]]
    pooled = [sum(Hh[i, c] for i in keep) / len(keep) for c in range(8)]
    W, b = params["intent.W"], params["intent.b"]
    naive = [sum(pooled[c] * W[c, k] for c in range(8)) + b[0, k] for k in range(7)]
    out = intent_logits(T.constant(Hh), mask, as_tensors(params))
    np.testing.assert_allclose(out.data[0], naive, rtol=1e-12, atol=1e-12)


def _decode_setup(cfg, params, src=(BOS, 5, 6, 7, EOS)):
    P = as_tensors(params)
    _, H_hat, trace = encoder_forward(list(src), vectors(cfg), P, cfg)
    return P, H_hat, trace.pad_mask


def test_decoder_bos_only_shape(tiny):
    cfg, params = tiny
    P, H_hat, mask = _decode_setup(cfg, params)
    assert decoder_forward([BOS], H_hat, mask, P, cfg).shape == (1, cfg.vocab_size)


def test_decoder_length_limits(tiny):
    cfg, params = tiny
    P, H_hat, mask = _decode_setup(cfg, params)
    with pytest.raises(InputError):
        decoder_forward([], H_hat, mask, P, cfg)
    with pytest.raises(InputError):
        decoder_forward([BOS] * (cfg.max_tgt_len + 1), H_hat, mask, P, cfg)


@settings(max_examples=20)
@given(pos=st.integers(0, 5), tok=st.integers(4, 19))
def test_decoder_is_causal(pos, tok):
    cfg = tiny_config()
    params = init_params(cfg)
    P, H_hat, mask = _decode_setup(cfg, params)
    tgt = [BOS, 8, 9, 10, 11, 12, 13]
    base = decoder_forward(tgt, H_hat, mask, P, cfg).data
    changed = list(tgt)
    changed[pos + 1] = tok
    out = decoder_forward(changed, H_hat, mask, P, cfg).data
    assert np.array_equal(base[: pos + 1], out[: pos + 1])


def test_cross_attention_rows_sum_to_one(tiny):
    cfg, params = tiny
    P, H_hat, mask = _decode_setup(cfg, params, src=(BOS, 5, 6, PAD, EOS))
    _, cross = decoder_forward([BOS, 4, 5], H_hat, mask, P, cfg, return_attention=True)
    assert len(cross) == cfg.n_decoder_layers
    for w in cross:
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(w.data[..., 3] < 1e-300)  # pad key gets no weight


def test_loss_uniform_logits():
    cfg = tiny_config(n_intents=7, vocab_size=50)
    tgt = [BOS, 9, 10, EOS]
    L, CL, GL = joint_loss(T.constant(np.zeros((1, 7))), 3, T.constant(np.zeros((3, 50))), tgt, cfg)
    assert abs(float(CL.data) - math.log(7)) < 1e-12
    assert abs(float(CL.data) - 1.945910) < 1e-6
    assert abs(float(GL.data) - math.log(50)) < 1e-12
    assert abs(float(GL.data) - 3.912023) < 1e-6


def test_loss_weighting_example():
    cfg = tiny_config()

    def row(value, n, target):
        # target logit 0 and one rival at log(e^value - 1): cross-entropy = value
        r = np.full((1, n), -1e300)
        r[0, target] = 0.0
        r[0, (target + 1) % n] = math.log(math.exp(value) - 1.0)
        return T.constant(r)

    L, CL, GL = joint_loss(row(1.0, 7, 2), 2, row(2.0, 20, 5), [BOS, 5], cfg)
    assert abs(float(CL.data) - 1.0) < 1e-12 and abs(float(GL.data) - 2.0) < 1e-12
    assert abs(float(L.data) - 1.8) < 1e-12


def test_loss_skips_pad_targets():
    cfg = tiny_config()
    lm = np.zeros((3, 20))
    lm[2, :] = np.random.default_rng(0).normal(size=20)  # row scored against PAD
    _, _, GL = joint_loss(T.constant(np.zeros((1, 7))), 0, T.constant(lm), [BOS, 5, 6, PAD], cfg)
    assert abs(float(GL.data) - math.log(20)) < 1e-12


def test_loss_row_mismatch():
    cfg = tiny_config()
    with pytest.raises(InputError):
        joint_loss(T.constant(np.zeros((1, 7))), 0, T.constant(np.zeros((2, 20))), [BOS, 5, EOS, 4], cfg)


def test_bad_intent_label():
    cfg = tiny_config()
    with pytest.raises(InputError):
        joint_loss(T.constant(np.zeros((1, 7))), 7, T.constant(np.zeros((1, 20))), [BOS, EOS], cfg)


def _intent_names(cfg):
    return [n for n in param_shapes(cfg) if n.startswith("intent.")]


def test_alpha1_zero_gives_no_intent_gradient():
    cfg = tiny_config(loss_alpha1=0.0, loss_alpha2=1.0)
    res = model_forward_backward(probe_bundle(cfg), init_params(cfg), cfg)
    for n in _intent_names(cfg):
        assert not res.grads[n].any()
    assert res.grads["lm.W"].any()


def test_alpha2_zero_gives_no_lm_gradient():
    cfg = tiny_config(loss_alpha1=1.0, loss_alpha2=0.0)
    res = model_forward_backward(probe_bundle(cfg), init_params(cfg), cfg)
    assert not res.grads["lm.W"].any() and not res.grads["lm.b"].any()
    assert res.grads["intent.W"].any()


def test_eos_stub_gives_empty_summary(tiny):
    cfg, params = tiny
    stub = dict(params)
    stub["lm.W"] = np.zeros_like(params["lm.W"])
    stub["lm.b"] = np.zeros_like(params["lm.b"])
    stub["lm.b"][0, EOS] = 10.0
    assert greedy_decode([BOS, 5, EOS], vectors(cfg), stub, cfg) == []


def test_decode_length_bound_and_determinism():
    cfg = tiny_config(max_tgt_len=60)
    params = init_params(cfg)
    params["lm.b"][0, EOS] = -100.0  # never stop early
    out = greedy_decode([BOS, 5, 6, EOS], vectors(cfg), params, cfg, max_len=50)
    assert len(out) == 50
    assert out == greedy_decode([BOS, 5, 6, EOS], vectors(cfg), params, cfg, max_len=50)


def test_argmax_ties_go_to_lowest_id(tiny):
    cfg, params = tiny
    stub = dict(params)
    stub["lm.W"] = np.zeros_like(params["lm.W"])
    stub["lm.b"] = np.zeros_like(params["lm.b"])
    stub["lm.b"][0, [6, 9]] = 5.0
    out = greedy_decode([BOS, 5, EOS], vectors(cfg), stub, cfg, max_len=3)
    assert out == [6, 6, 6]


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, loss_alpha1=0.5, loss_alpha2=0.6)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=20, modalities=("audio", "smell"))
    cfg = ModelConfig(vocab_size=20, modalities=("personal", "audio"))
    assert cfg.modalities == ("audio", "personal")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_seeded():
    cfg = tiny_config(seed=3)
    a, b = init_params(cfg), init_params(cfg)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert list(a) == list(param_shapes(cfg))

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lowres_nmt.criterion import FocalConfig, SmoothedCEConfig, focal_loss, label_smoothed_ce
from lowres_nmt.model import (BANNED_IDS, ConfigError, DecodeConfig, ModelConfig, backward,
                              beam_search, beam_search_fn, count_parameters, forward,
                              greedy_batch, greedy_decode, init_model, log_softmax)
from lowres_nmt.tokenizer import BOS_ID, EOS_ID, PAD_ID

SRC = np.array([[5, 6, 7, 3, 4], [8, 5, 3, 4, 0]])
TGT_IN = np.array([[4, 9, 6, 10], [4, 7, 0, 0]])
TGT_OUT = np.array([[9, 6, 10, 3], [7, 3, 0, 0]])


def closed_form_count(V, L, D, H, F, P):
    attn = 4 * (D * D + D)
    norm = 2 * D
    ffn = D * F + F + F * D + D
    enc = attn + 2 * norm + ffn
    dec = 2 * attn + 3 * norm + ffn
    return V * D + 2 * P * D + L * (enc + dec) + 2 * norm


@pytest.mark.parametrize("V,L,D,H,F,P", [(11, 1, 8, 2, 16, 16), (120, 1, 64, 4, 128, 32),
                                         (1000, 2, 64, 4, 256, 128), (37, 3, 12, 3, 20, 9)])
def test_parameter_count_closed_form(V, L, D, H, F, P):
    cfg = ModelConfig(V, L, D, H, F, P)
    assert count_parameters(cfg) == closed_form_count(V, L, D, H, F, P)
    assert init_model(cfg).num_parameters() == closed_form_count(V, L, D, H, F, P)


def test_copy_task_model_is_under_100k():
    assert count_parameters(ModelConfig(120, 1, 64, 4, 128, 32)) <= 100_000


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(10, hidden_size=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(10, dropout_rate=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(0)
    cfg = ModelConfig(10)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_properties(tiny_config):
    m = init_model(tiny_config)
    assert np.all(m.params["embed_tokens"][PAD_ID] == 0)
    assert np.all(m.params["encoder.layer_norm.weight"] == 1)
    assert np.all(m.params["decoder.layers.0.fc1.bias"] == 0)
    again = init_model(tiny_config)
    assert all(np.array_equal(m.params[n], again.params[n]) for n in m.params)


def test_logits_shape_and_single_sequence(tiny_model64):
    res = forward(tiny_model64, SRC, TGT_IN)
    assert res.logits.shape == (2, 4, 11)
    one = forward(tiny_model64, SRC[0], TGT_IN[0])
    np.testing.assert_allclose(one.logits, res.logits[0], atol=1e-12)


def test_decoder_is_causal(tiny_model64):
    base = forward(tiny_model64, SRC[:1], TGT_IN[:1]).logits
    changed = TGT_IN[:1].copy()
    changed[0, 2] = 5
    other = forward(tiny_model64, SRC[:1], changed).logits
    np.testing.assert_array_equal(base[0, :2], other[0, :2])
    assert not np.allclose(base[0, 2:], other[0, 2:])


def test_source_padding_is_invisible(tiny_model64):
    short = forward(tiny_model64, np.array([[8, 5, 3, 4]]), TGT_IN[1:]).logits
    padded = forward(tiny_model64, np.array([[8, 5, 3, 4, 0, 0]]), TGT_IN[1:]).logits
    np.testing.assert_allclose(short, padded, atol=1e-12)


def test_too_long_input_raises(tiny_model64):
    with pytest.raises(ValueError, match="max_positions"):
        forward(tiny_model64, np.ones((1, 17), dtype=int), TGT_IN[:1])


def _loss(model, crit, cfg, train=False):
    res = forward(model, SRC, TGT_IN, train=train, dropout_seed=[1, 2], dropout=0.2)
    return res, crit(res.logits, TGT_OUT, cfg)


@pytest.mark.parametrize("crit,cfg,train", [(label_smoothed_ce, SmoothedCEConfig(0.1), False),
                                            (focal_loss, FocalConfig(0.5, 1.0), False),
                                            (label_smoothed_ce, SmoothedCEConfig(0.1), True)])
def test_model_gradients_finite_differences(tiny_model64, crit, cfg, train):
    model = tiny_model64
    res, out = _loss(model, crit, cfg, train)
    grads = backward(res, out.grad_logits)
    rng = np.random.default_rng(0)
    h = 1e-5
    worst = 0.0
    for name, p in model.params.items():
        d = rng.normal(size=p.shape)
        d /= np.linalg.norm(d)
        analytic = float((grads[name] * d).sum())
        orig = p.copy()
        p[...] = orig + h * d
        up = _loss(model, crit, cfg, train)[1].loss
        p[...] = orig - h * d
        down = _loss(model, crit, cfg, train)[1].loss
        p[...] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_frozen_parameters_get_zero_gradient(tiny_model64):
    tiny_model64.freeze(["decoder.layers.*", "embed_tokens"])
    res, out = _loss(tiny_model64, label_smoothed_ce, SmoothedCEConfig())
    grads = backward(res, out.grad_logits)
    for name in tiny_model64.frozen:
        assert not grads[name].any()
    assert grads["encoder.layers.0.fc1.weight"].any()


def test_dropout_is_seeded(tiny_config):
    m = init_model(tiny_config.__class__(**{**tiny_config.to_dict(), "dropout_rate": 0.3}))
    a = forward(m, SRC, TGT_IN, train=True, dropout_seed=[0, 5]).logits
    b = forward(m, SRC, TGT_IN, train=True, dropout_seed=[0, 5]).logits
    c = forward(m, SRC, TGT_IN, train=True, dropout_seed=[0, 6]).logits
    e = forward(m, SRC, TGT_IN, train=False).logits
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, e)


# -- decoding ----------------------------------------------------------------

V = 6  # 0 pad, 1 unk, 2 bos, 3 eos, 4 start tag, 5 word


def toy_step(table):
    def step(prefixes):
        return np.array([log_softmax(np.asarray(table(tuple(p)), dtype=np.float64))
                         for p in prefixes])
    return step


def hand_logits(prefix):
    # a hand-set scorer whose greedy path is not the best sequence
    body = prefix[1:]
    z = np.full(V, -1.0)
    if len(body) == 0:
        z[[1, 3, 5]] = [2.0, 1.5, 1.0]
    elif body[-1] == 1:
        z[[1, 3, 5]] = [0.2, 0.1, 0.0]
    elif body[-1] == 5:
        z[[3]] = [4.0]
    else:
        z[3] = 0.5
    return z


def exhaustive(step, max_len, lenpen, start=(4,)):
    """Every finishable sequence, scored the way the decoder scores them."""
    out = []
    toks = [t for t in range(V) if t not in BANNED_IDS and t != EOS_ID]
    for n in range(max_len + 1):
        for body in itertools.product(toks, repeat=n):
            prefix = list(start)
            raw = 0.0
            for t in body:
                raw += step([prefix])[0][t]
                prefix.append(t)
            raw += step([prefix])[0][EOS_ID]
            truncated = n == max_len
            length = n + 1
            out.append((raw / length ** lenpen, raw, tuple(body) + (EOS_ID,), truncated))
    out.sort(key=lambda r: -r[0])
    return out


@pytest.mark.parametrize("lenpen", [0.0, 1.0, 2.0])
def test_wide_beam_matches_exhaustive_search(lenpen):
    step = toy_step(hand_logits)
    max_len = 3
    oracle = exhaustive(step, max_len, lenpen)
    hyps = beam_search_fn(step, [4], DecodeConfig(beam_size=200, lenpen=lenpen, max_len=max_len))
    best = hyps[0]
    assert best.ids == oracle[0][2]
    assert best.normalized_score == pytest.approx(oracle[0][0], abs=1e-12)
    assert best.raw_score == pytest.approx(oracle[0][1], abs=1e-12)
    assert best.truncated == oracle[0][3]
    assert [h.normalized_score for h in hyps] == sorted([h.normalized_score for h in hyps],
                                                        reverse=True)


def test_hand_set_scorer_beats_greedy():
    step = toy_step(hand_logits)
    greedy = beam_search_fn(step, [4], DecodeConfig(1, 1.0, 3))[0]
    beam = beam_search_fn(step, [4], DecodeConfig(3, 1.0, 3))[0]
    assert greedy.ids[0] == 1
    assert beam.ids == (5, EOS_ID)
    assert beam.normalized_score > greedy.normalized_score


def test_truncation_forces_eos():
    # a scorer that never wants eos
    step = toy_step(lambda p: np.array([0, 0, 0, -30.0, 0, 5.0]))
    h = beam_search_fn(step, [4], DecodeConfig(2, 1.0, 4))[0]
    assert h.truncated and h.ids == (5, 5, 5, 5, EOS_ID)


def test_lenpen_favors_longer_outputs():
    def scorer(p):
        z = np.full(V, -1.0)
        z[3] = 0.0
        z[5] = 0.0 if len(p) < 4 else -5.0
        return z
    step = toy_step(scorer)
    short = beam_search_fn(step, [4], DecodeConfig(4, 0.0, 6))[0]
    long = beam_search_fn(step, [4], DecodeConfig(4, 3.0, 6))[0]
    assert len(long.ids) > len(short.ids)


def test_banned_ids_never_generated():
    step = toy_step(lambda p: np.array([9.0, 0, 9.0, 0, 0, 0]))
    for h in beam_search_fn(step, [4], DecodeConfig(3, 1.0, 4)):
        assert PAD_ID not in h.ids and BOS_ID not in h.ids


@pytest.fixture(scope="module")
def random_model():
    return init_model(ModelConfig(vocab_size=12, num_layers=1, hidden_size=16, num_heads=2,
                                  ffn_size=32, max_positions=10, seed=7))


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(5, 11), min_size=1, max_size=6), st.floats(0.0, 2.0))
def test_beam_one_equals_greedy(random_model, src, lenpen):
    src = src + [EOS_ID, 4]
    hb = beam_search(random_model, src, DecodeConfig(1, lenpen, 6), 4)[0]
    hg = greedy_decode(random_model, src, 4, 6, lenpen)
    hbatch = greedy_batch(random_model, [src, src[:1] + [EOS_ID, 4]], 4, 6, lenpen)[0]
    assert hb.ids == hg.ids == hbatch.ids
    assert hb.raw_score == pytest.approx(hg.raw_score, abs=1e-9)
    assert hbatch.raw_score == pytest.approx(hg.raw_score, abs=1e-5)


def test_max_len_capped_by_positions(random_model):
    # max_len beyond the positional table must not crash
    h = beam_search(random_model, [5, 6, EOS_ID, 4], DecodeConfig(2, 1.0, 50), 4)[0]
    assert len(h.ids) <= random_model.config.max_positions
    hs = greedy_batch(random_model, [[5, EOS_ID, 4]] * 3, 4, 50)
    assert all(len(x.ids) <= random_model.config.max_positions for x in hs)


def test_decoding_is_deterministic(random_model):
    a = beam_search(random_model, [5, 6, 7, EOS_ID, 4], DecodeConfig(3, 1.0, 8), 4)
    b = beam_search(random_model, [5, 6, 7, EOS_ID, 4], DecodeConfig(3, 1.0, 8), 4)
    assert a == b


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ConfigError):
        DecodeConfig(lenpen=-1)
    assert math.isclose(DecodeConfig().lenpen, 1.0)

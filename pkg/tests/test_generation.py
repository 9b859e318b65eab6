import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hylat.errors import CapacityError, InputError, NumericError
from hylat.generation import (DecodeRequest, SamplingConfig, apply_sampling, decode_batch,
                              extract_answer, hybrid_decode, sampling_distribution)
from hylat.model import ModelConfig, TinyTransformer
from hylat.protocol import ANSWER_PROMPT, ChannelMode, initial_context
from hylat.vocab import BOT, EOT, VOCAB

logit_arrays = arrays(np.float64, st.integers(2, 30), elements=st.floats(-20, 20))


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(num_layers=2, num_heads=2, d_model=16, d_ff=32, vocab_size=len(VOCAB),
                      max_seq_len=48, seed=7)
    return TinyTransformer(cfg)


@settings(max_examples=200, deadline=None)
@given(logit_arrays, st.floats(0.1, 3.0), st.one_of(st.none(), st.integers(1, 40)),
       st.one_of(st.none(), st.floats(0.05, 1.0)))
def test_distribution_properties(logits, temp, top_k, top_p):
    cfg = SamplingConfig(temperature=temp, top_k=top_k, top_p=top_p)
    p = sampling_distribution(logits, cfg)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    support = np.count_nonzero(p)
    if top_k is not None:
        assert support <= top_k
    if top_k is None and top_p is None:
        z = logits / temp
        ref = np.exp(z - z.max())
        np.testing.assert_allclose(p, ref / ref.sum(), rtol=1e-9, atol=1e-300)
    if top_p is not None and top_k is None:
        z = logits / temp
        full = np.exp(z - z.max())
        full /= full.sum()
        kept = full[p > 0].sum()
        assert kept >= top_p - 1e-9
        # dropping the smallest kept entry would fall below top_p
        assert kept - full[p > 0].min() < top_p + 1e-9 or support == 1


def test_top_k_ties_keep_lowest_ids():
    p = sampling_distribution(np.array([1.0, 2.0, 2.0, 2.0]), SamplingConfig(temperature=1.0, top_k=2))
    assert list(np.nonzero(p)[0]) == [1, 2]


def test_greedy_and_degenerate_inputs():
    assert apply_sampling(np.array([0.1, 3.0, 2.0]), SamplingConfig()) == 1
    p = sampling_distribution(np.full(4, -np.inf), SamplingConfig(temperature=1.0))
    np.testing.assert_array_equal(p, [1, 0, 0, 0])
    with pytest.raises(NumericError):
        sampling_distribution(np.array([0.0, np.nan]), SamplingConfig())
    with pytest.raises(InputError):
        SamplingConfig(temperature=-1)
    with pytest.raises(InputError):
        SamplingConfig(top_p=0.0)


def test_extract_answer():
    assert extract_answer([*ANSWER_PROMPT, 30]) == [30]
    assert extract_answer([5, *ANSWER_PROMPT, 31, *ANSWER_PROMPT, 30, 32]) == [30, 32]
    assert extract_answer([30, 31]) is None


def test_rollout_feeds_back_final_hidden_state(model):
    ctx = [4, 30, 40, 31, 9]
    (res,) = decode_batch(model, [DecodeRequest(ctx, k=4)], SamplingConfig(max_text_len=3))
    items = ctx + [BOT]
    for i in range(4):
        ref = model.forward(items).hidden[-1, -1]
        np.testing.assert_allclose(res.latents[i], ref, atol=1e-5)
        items.append(res.latents[i])
    assert res.text[:2] == list(ANSWER_PROMPT)
    # the forced prompt then greedy tokens follow <eot>
    items += [EOT, *ANSWER_PROMPT]
    for tok in res.text[2:]:
        assert tok == int(np.argmax(model.forward(items).logits[-1]))
        items.append(tok)


def test_batch_composition_invariance(model):
    reqs = [DecodeRequest([4, 30 + i, 10 + i], k=3) for i in range(5)]
    reqs.append(DecodeRequest([4, 33, 41, 31, 50, 51, 52], latent=False))
    cfg = SamplingConfig(max_text_len=4, max_free_text_len=5)
    together = decode_batch(model, reqs, cfg)
    for r, res in zip(reqs, together):
        (alone,) = decode_batch(model, [r], cfg)
        assert alone.text == res.text
        if r.latent:
            np.testing.assert_allclose(alone.latents, res.latents, atol=1e-5)
        else:
            assert res.latents is None


def test_sampled_decoding_is_seeded(model):
    cfg = SamplingConfig(temperature=1.5, max_free_text_len=12, seed=3)
    a = decode_batch(model, [DecodeRequest([4, 30], latent=False, rng_key=(1,))], cfg)[0]
    b = decode_batch(model, [DecodeRequest([4, 30], latent=False, rng_key=(1,))], cfg)[0]
    assert a.text == b.text
    outs = {tuple(decode_batch(model, [DecodeRequest([4, 30], latent=False, rng_key=(j,))],
                               cfg)[0].text) for j in range(6)}
    assert len(outs) > 1


def test_modes_and_capacity(model):
    ctx = initial_context(0, [30, 31], max_seq_len=48)
    cfg = SamplingConfig(max_text_len=2, max_free_text_len=3)
    msg, _ = hybrid_decode(model, ctx, 6, cfg, mode=ChannelMode.LATENT_ONLY_UNTIL_FINAL, final_round=False)
    assert msg.k == 6 and msg.text.m == 0
    msg, _ = hybrid_decode(model, ctx, 6, cfg, mode=ChannelMode.TEXT_ONLY)
    assert msg.latent is None and BOT not in msg.text.tokens
    with pytest.raises(CapacityError):
        decode_batch(model, [DecodeRequest([4] * 40, k=6)], cfg)
    with pytest.raises(InputError):
        decode_batch(model, [DecodeRequest([4], latent=False, text=False)], cfg)


def test_attention_rows_are_distributions(model):
    cfg = SamplingConfig(max_text_len=3)
    (res,) = decode_batch(model, [DecodeRequest([4, 30, 31], k=2)], cfg, capture=True)
    n_text = len(res.text) - 2 + (1 if res.stopped else 0)
    assert len(res.attention) == 2 + n_text
    for row in res.attention:
        assert abs(row.sum() - 1) < 1e-6
    # latent steps attend over the context, <bot> and earlier latents
    assert [len(r) for r in res.attention[:2]] == [4, 5]

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffasr.data import PAD_ID
from diffasr.model import DiffusionASR, ModelConfig
from diffasr.pdd import (
    NAMED_SCHEDULES,
    STANDARD_SCHEDULE,
    STEP_SCHEDULES,
    CandidateBatch,
    PddConfig,
    batch_generate,
    decode_pdd,
    decode_single,
    oracle_wer,
    refine_step,
    select,
    utterance_record,
)

SMALL = ModelConfig(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=2, max_frames=48, init_seed=5)


@pytest.fixture(scope="module")
def model():
    m = DiffusionASR(SMALL)
    with torch.no_grad():
        # sharpen the head a little so candidates are neither uniform nor identical
        m.decoder.head.weight.mul_(40)
        for blk in m.decoder.blocks:
            blk.cross_attn.attn.wo.weight.normal_(0, 0.2, generator=torch.Generator().manual_seed(2))
    m.eval()
    return m


@pytest.fixture(scope="module")
def ctx(model):
    return model.encode(np.random.default_rng(0).standard_normal((40, SMALL.d_feat)).astype(np.float32))


def test_config_validation():
    assert PddConfig().k == 15 and PddConfig().schedule == STANDARD_SCHEDULE and PddConfig().n_steps == 4
    for bad in (dict(k=0), dict(schedule=(0.9, 0.8)), dict(schedule=(1.0, 0.0)), dict(temperature=0)):
        with pytest.raises(ValueError):
            PddConfig(**bad)


def test_stock_schedules():
    assert STEP_SCHEDULES[2] == (1.0, 0.85)
    assert STEP_SCHEDULES[4] == (1.0, 0.9, 0.85, 0.8)
    assert all(len(s) == n and s[0] == 1.0 for n, s in STEP_SCHEDULES.items())
    assert (1.0, 0.7, 0.5, 0.3) in NAMED_SCHEDULES.values()


def test_batch_generate_one_call_any_k(model, ctx):
    for k in (1, 5, 15):
        before = model.decoder.calls
        b = batch_generate(model, ctx, k, 1.0, seed=0, utt_key="u")
        assert model.decoder.calls - before == 1
        assert b.canvases.shape == (k, SMALL.max_canvas_len)
        assert ((0 <= b.last_pred_prob) & (b.last_pred_prob <= 1)).all()
        assert not (b.canvases == SMALL.mask_id).any()


def test_batch_generate_greedy_is_identical_and_sampling_is_diverse(model, ctx):
    g = batch_generate(model, ctx, 6, greedy=True)
    assert (g.canvases == g.canvases[0]).all()
    s = batch_generate(model, ctx, 15, 1.0, seed=1, utt_key="u")
    assert len({c.tobytes() for c in s.canvases}) >= 2
    with pytest.raises(ValueError):
        batch_generate(model, ctx, 3, temperature=0.0)


def test_refine_step_contract(model, ctx):
    b = batch_generate(model, ctx, 5, 1.0, seed=0, utt_key="u")
    before = model.decoder.calls
    r = refine_step(model, b, 0.3, ctx, seed=0, utt_key="u", step=2)
    assert model.decoder.calls - before == 1
    n = int(round(0.3 * SMALL.max_canvas_len))
    changed = r.canvases != b.canvases
    prob_changed = r.last_pred_prob != b.last_pred_prob
    for j in range(5):
        assert changed[j].sum() <= n and prob_changed[j].sum() <= n
    full = refine_step(model, b, 1.0, ctx, seed=0, utt_key="u", step=2)
    # a full remask re-predicts every row from the same all-mask canvas: rows become identical
    assert (full.canvases == full.canvases[0]).all()
    with pytest.raises(ValueError):
        refine_step(model, b, 0.0, ctx)


@pytest.mark.parametrize("k", [1, 5, 15])
@pytest.mark.parametrize("n", [2, 4, 8])
def test_decode_pdd_makes_exactly_n_calls(model, ctx, k, n):
    cfg = PddConfig(k=k, schedule=STEP_SCHEDULES[n])
    assert decode_pdd(model, ctx, cfg, utt_key="x").decoder_calls == n


def test_decode_pdd_is_deterministic(model, ctx):
    cfg = PddConfig(k=7, rng_seed=3)
    a = decode_pdd(model, ctx, cfg, utt_key="u1")
    b = decode_pdd(model, ctx, cfg, utt_key="u1")
    assert a.transcript == b.transcript
    np.testing.assert_array_equal(a.batch.canvases, b.batch.canvases)


def test_k_prefix_superset(model, ctx):
    small = decode_pdd(model, ctx, PddConfig(k=5, rng_seed=2), utt_key="u")
    big = decode_pdd(model, ctx, PddConfig(k=15, rng_seed=2), utt_key="u")
    np.testing.assert_array_equal(big.batch.canvases[:5], small.batch.canvases)
    ref = "the cat sat on the mat"
    assert oracle_wer(big.candidate_texts, ref)[0] <= oracle_wer(small.candidate_texts, ref)[0]


def test_decode_single_equals_greedy_k1(model, ctx):
    a = decode_single(model, ctx, STANDARD_SCHEDULE, seed=4, utt_key="u")
    b = decode_pdd(model, ctx, PddConfig(k=1, rng_seed=4), utt_key="u", greedy=True)
    assert a.transcript == b.transcript and a.decoder_calls == 4


def test_trace_tokens_changed(model, ctx):
    res = decode_pdd(model, ctx, PddConfig(k=6), reference="some words here", utt_key="u")
    assert len(res.trace) == 4
    assert res.trace[0].tokens_changed == 1.0
    for s, rho in zip(res.trace[1:], STANDARD_SCHEDULE[1:]):
        assert s.tokens_changed <= round(rho * SMALL.max_canvas_len) / SMALL.max_canvas_len
        assert len(s.candidate_wers) == 6


def test_confidence_is_mean_over_non_pad():
    canv = np.array([[5, 6, PAD_ID, PAD_ID], [PAD_ID] * 4])
    prob = np.array([[0.5, 0.7, 0.01, 0.01], [0.3] * 4])
    b = CandidateBatch(canv, prob, PAD_ID)
    np.testing.assert_allclose(b.confidences, [0.6, 0.0])


def _batch(conf):
    conf = np.asarray(conf, dtype=float)
    return CandidateBatch(np.full((len(conf), 3), 5), np.repeat(conf[:, None], 3, axis=1), PAD_ID)


def test_select_examples():
    assert select(_batch([0.4])) == 0
    assert select(_batch([0.9, 0.95, 0.93])) == 1
    assert select(_batch([0.5, 0.7, 0.7])) == 1


@settings(max_examples=200)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.5, 0.9]), min_size=1, max_size=15))
def test_select_is_argmax_with_lowest_index_tiebreak(conf):
    b = _batch(conf)
    best = max(b.confidences)
    assert select(b) == min(i for i, c in enumerate(b.confidences) if c == best)


def test_oracle_wer_examples():
    assert oracle_wer(["a b", "the cat"], "the cat") == (0.0, 1)
    assert oracle_wer(["x", "y"], "z")[1] == 0


def test_utterance_record_consistency(model, ctx):
    res = decode_pdd(model, ctx, PddConfig(k=8), reference="hello there", utt_key="u")
    rec = utterance_record("u", "hello there", res)
    assert rec["oracle_wer"] <= rec["selected_wer"] == rec["wer"]
    assert rec["oracle_wer"] == min(rec["candidate_wers"])
    assert rec["selected_index"] == select(res.batch)
    assert rec["confidence"] == max(rec["candidate_confidences"])
    assert rec["decoder_calls"] == 4 and len(rec["trace"]) == 4

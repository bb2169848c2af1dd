import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from diffasr import curriculum as C
from diffasr import data as D
from diffasr.errors import ContractViolation
from diffasr.model import DiffusionASR, ModelConfig, partition
from diffasr.numerics import load_checkpoint, save_checkpoint, stream, tensor_digest

TINY = ModelConfig(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=3, max_frames=192, init_seed=1)
SPEC = D.SynthSpec()


@pytest.fixture(scope="module")
def corpus():
    utts = D.gen_corpus(D.make_source_text(0, 20000), 120, (20, 40), stream(0, "c"), SPEC)
    return [u for u in utts if u.split == "train"][:48], [u for u in utts if u.split == "dev"][:12]


def quick(stage, **kw):
    base = dict(max_epochs=1, batch_size=16, val_wer_utts=0)
    base.update(kw)
    return replace(C.DEFAULT_STAGES[stage], **base)


@pytest.fixture(scope="module")
def stage0(corpus):
    train, dev = corpus
    enc, _ = C.pretrain_encoder(train, dev, SPEC, TINY, quick("0e", max_epochs=20))
    dec, _ = C.pretrain_decoder_text([u.transcript for u in train], [u.transcript for u in dev], TINY, quick("0d"))
    enc_state = {f"encoder.{k}": v for k, v in enc.state_dict().items()}
    dec_state = {k: v for k, v in dec.state_dict().items() if k.startswith("decoder.")}
    return enc, enc_state, dec_state


def test_llrd_rates_examples():
    rates = C.llrd_rates(1e-5, 0.9, 6)
    assert rates[6] == 1e-5 and rates[1] == pytest.approx(1e-5 * 0.9**5, rel=1e-15)
    assert all(rates[l] <= rates[l + 1] for l in range(1, 6))
    assert set(C.llrd_rates(3e-4, 1.0, 4).values()) == {3e-4}
    with pytest.raises(ValueError):
        C.llrd_rates(1e-3, 0.0, 4)


def test_stage_config_invariants():
    assert C.DEFAULT_STAGES["1"].roles_trainable == {"adapter"}
    assert C.DEFAULT_STAGES["2"].roles_trainable == {"adapter", "decoder_body"}
    assert (C.DEFAULT_STAGES["2"].mask_low, C.DEFAULT_STAGES["2"].mask_high) == (0.7, 1.0)
    with pytest.raises(ValueError):
        replace(C.DEFAULT_STAGES["2"], mask_low=0.5)
    with pytest.raises(ValueError):
        C.StageConfig("3", 1e-3, 0.1, 0.0)


def test_early_stopping_scripted_sequence():
    es = C.EarlyStopping(patience=2)
    fired = []
    for epoch, v in enumerate([5.0, 4.0, 4.5, 3.9, 4.0, 4.0, 3.0], start=1):
        es.update(v, epoch)
        fired.append(es.should_stop)
    assert fired == [False, False, False, False, False, True, False]
    assert es.best_epoch == 7


def test_early_stopping_stops_training_at_patience(corpus, stage0):
    train, dev = corpus
    enc, enc_state, dec_state = stage0
    model = C.assemble(enc_state, dec_state, TINY)
    pair_t = C.paired_set(enc, train, SPEC, TINY.max_canvas_len)
    values = iter([1.0, 0.9, 0.95, 0.97, 0.99, 0.5])

    def validate():
        return {"val_loss": next(values)}

    C.set_trainable(model, partition(model), {"adapter"})
    live = [p for p in model.parameters() if p.requires_grad]
    cfg = quick("1", max_epochs=5, patience=3)
    res = C.fit(model, len(pair_t), cfg, lambda idx, rng, e: sum((p**2).sum() for p in live), validate)
    # epoch 0 (initial), epoch 1 improves, epochs 2-4 fail -> stop after epoch 4
    assert [r["epoch"] for r in res.log] == [0, 1, 2, 3, 4]
    assert res.best_epoch == 1


def test_untrained_decoder_fill_is_near_chance():
    texts = ["the quick brown fox jumps", "over the lazy dog again"]
    acc = C.fill_accuracy(DiffusionASR(TINY), texts)
    assert acc < 0.25


def test_probe_with_shuffled_labels_is_near_chance(corpus, stage0):
    train, dev = corpus
    enc = stage0[0]
    shuffled = C.probe_accuracy(enc, train, dev, SPEC, steps=100, shuffle_labels=True)
    clean = C.probe_accuracy(enc, train, dev, SPEC, steps=100)
    assert shuffled < 0.25 and clean > shuffled + 0.2


def test_assemble_keeps_stage0_weights_and_fresh_adapters(stage0):
    _, enc_state, dec_state = stage0
    model = C.assemble(enc_state, dec_state, TINY)
    sd = model.state_dict()
    for k, v in {**enc_state, **dec_state}.items():
        if ".cross_attn." not in k:
            assert torch.equal(sd[k], v)
    for blk in model.decoder.blocks:
        assert (blk.cross_attn.attn.wo.weight == 0).all()


def test_stage1_and_stage2_freeze_contracts_and_llrd(corpus, stage0, tmp_path):
    train, dev = corpus
    enc, enc_state, dec_state = stage0
    model = C.assemble(enc_state, dec_state, TINY)
    part = partition(model)
    pair_t = C.paired_set(enc, train, SPEC, TINY.max_canvas_len)
    pair_d = C.paired_set(enc, dev, SPEC, TINY.max_canvas_len)
    digest = lambda roles: tensor_digest((n, p) for n, p in model.named_parameters() if n in set(part.names_for(roles)))

    enc_hash, body_hash, adapter_hash = digest({"encoder"}), digest({"decoder_body"}), digest({"adapter"})
    log1 = tmp_path / "s1.jsonl"
    C.train_stage1(model, pair_t, pair_d, quick("1", max_epochs=2, val_wer_utts=2), log_path=log1)
    assert digest({"encoder"}) == enc_hash and digest({"decoder_body"}) == body_hash
    assert digest({"adapter"}) != adapter_hash
    records = [json.loads(l) for l in log1.read_text().splitlines()]
    assert [r["epoch"] for r in records] == list(range(len(records)))
    assert {"train_loss", "val_loss", "val_wer", "val_cer", "lr", "wall_s"} <= set(records[-1])

    cfg2 = quick("2", max_epochs=1)
    r2 = C.train_stage2(model, pair_t, pair_d, cfg2)
    assert digest({"encoder"}) == enc_hash
    assert all(0.7 <= t <= 1.0 for t in r2.sampled_t) and len(r2.sampled_t) == len(train)
    # effective per-layer rates equal base * gamma^(L - l) exactly, at every step
    rates = C.llrd_rates(1.0, cfg2.llrd_gamma, TINY.n_dec_layers)
    for snap in r2.lr_trace:
        top = snap[f"decoder_body.{TINY.n_dec_layers}"]
        for l in range(1, TINY.n_dec_layers + 1):
            for role in ("decoder_body", "adapter"):
                assert snap[f"{role}.{l}"] == top * rates[l]


def test_frozen_guard_raises_on_tamper(stage0):
    model = C.assemble(stage0[1], stage0[2], TINY)
    names = [n for n, _ in model.named_parameters() if n.startswith("encoder.")]
    check, _ = C._trainable_digest_guard(model, names)
    check()
    with torch.no_grad():
        model.encoder.front.bias.add_(1.0)
    with pytest.raises(ContractViolation):
        check()


def test_checkpoint_round_trip_reproduces_validation_loss(stage0, corpus, tmp_path):
    _, enc_state, dec_state = stage0
    model = C.assemble(enc_state, dec_state, TINY)
    texts = [u.transcript for u in corpus[1]]
    canv = torch.as_tensor(np.stack([D.tokenize(t) for t in texts]))
    masked, mask, t = C._val_masks(canv, 0.0, 1.0, 0, "rt")
    before = C._chunked_loss(model, canv, masked, mask, t, None, False)
    save_checkpoint(tmp_path, model.state_dict(), TINY.to_dict())
    tensors, cfg, _ = load_checkpoint(tmp_path)
    again = DiffusionASR(ModelConfig.from_dict(cfg))
    again.load_state_dict(tensors)
    assert C._chunked_loss(again, canv, masked, mask, t, None, False) == before


def test_ar_training_keeps_encoder_frozen(corpus, stage0):
    train, dev = corpus
    enc, enc_state, _ = stage0
    pair_t = C.paired_set(enc, train, SPEC, TINY.max_canvas_len)
    pair_d = C.paired_set(enc, dev, SPEC, TINY.max_canvas_len)
    model, res = C.train_ar(enc_state, pair_t, pair_d, TINY, quick("ar"))
    for k, v in enc_state.items():
        assert torch.equal(model.state_dict()[k], v)
    assert res.log[-1]["val_loss"] < res.log[0]["val_loss"]

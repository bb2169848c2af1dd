"""Surrogate pre-training (stage 0) and the two fine-tuning stages.

Stage 0 stands in for pre-trained components: an encoder taught to classify
the character behind each frame, and a decoder taught unconditional masked
denoising on text alone. Stage 1 trains only the cross-attention adapters on
U(0, 1) masking; stage 2 unfreezes the decoder and trains on U(0.7, 1.0)
masking with layer-wise learning-rate decay. The encoder never moves after
stage 0.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as D
from . import eval as metrics
from .ar import ArModel, ar_loss
from .diffusion import corrupt_bernoulli_batch, mdm_loss, sample_t
from .errors import ContractViolation, NumericFault
from .model import (
    AcousticContext,
    AcousticEncoder,
    DiffusionASR,
    ModelConfig,
    ParamPartition,
    batch_features,
    partition,
    set_trainable,
)
from .numerics import LrPlan, OptimState, adamw_step, lr_at, stream, tensor_digest
from .pdd import decode_single

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    stage: str
    base_lr: float
    warmup_ratio: float
    weight_decay: float
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 5
    llrd_gamma: float | None = None
    mask_low: float = 0.0
    mask_high: float = 1.0
    schedule_unit: str = "step"
    augment: bool = False
    val_wer_utts: int = 0
    seed: int = 0

    @property
    def roles_trainable(self) -> set[str]:
        return {
            "0e": {"encoder"},
            "0d": {"decoder_body"},
            "1": {"adapter"},
            "2": {"adapter", "decoder_body"},
            "ar": {"adapter", "decoder_body"},
        }[self.stage]

    def __post_init__(self):
        if self.stage not in ("0e", "0d", "1", "2", "ar"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.schedule_unit not in ("step", "epoch"):
            raise ValueError("schedule_unit must be 'step' or 'epoch'")
        if self.stage == "2" and (self.mask_low, self.mask_high) != (0.7, 1.0):
            raise ValueError("stage 2 trains on masking ratios in [0.7, 1.0]")
        if self.llrd_gamma is not None and not 0 < self.llrd_gamma <= 1:
            raise ValueError("llrd_gamma must lie in (0, 1]")


DEFAULT_STAGES = {
    "0e": StageConfig(
        "0e", base_lr=1e-3, warmup_ratio=0.05, weight_decay=0.01, batch_size=32, max_epochs=10, patience=4, augment=True
    ),
    "0d": StageConfig("0d", base_lr=1e-3, warmup_ratio=0.05, weight_decay=0.01, batch_size=8, max_epochs=10, patience=10),
    "1": StageConfig(
        "1", base_lr=1e-3, warmup_ratio=0.02, weight_decay=0.01, batch_size=32, max_epochs=10, patience=4,
        schedule_unit="epoch", val_wer_utts=48,
    ),
    "2": StageConfig(
        "2", base_lr=1e-3, warmup_ratio=0.1, weight_decay=0.005, batch_size=32, max_epochs=40, patience=8,
        llrd_gamma=0.9, mask_low=0.7, mask_high=1.0, augment=True, val_wer_utts=48,
    ),
    "ar": StageConfig("ar", base_lr=1e-3, warmup_ratio=0.05, weight_decay=0.01, batch_size=32, max_epochs=20, patience=4),
}


# ---------------------------------------------------------------------------
# Schedules and early stopping
# ---------------------------------------------------------------------------


def llrd_rates(base_lr: float, gamma: float, n_layers: int) -> dict[int, float]:
    """Layer ``l`` (1 = input side, L = output side) trains at ``base_lr * gamma**(L - l)``."""
    if gamma <= 0 or gamma > 1:
        raise ValueError("gamma must lie in (0, 1]")
    return {l: base_lr * gamma ** (n_layers - l) for l in range(1, n_layers + 1)}


def llrd_scales(part: ParamPartition, gamma: float) -> dict[str, float]:
    scales = {}
    for group in part.groups:
        layer = part.layer(group)
        if layer is not None:
            scales[group] = gamma ** (part.n_layers - layer)
    return scales


class EarlyStopping:
    """Stops once the monitored value has failed to improve ``patience`` epochs in a row."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Paired data held in memory
# ---------------------------------------------------------------------------


@dataclass
class PairedSet:
    utts: list[D.Utterance]
    canvases: torch.Tensor
    contexts: list[torch.Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.utts)

    def batch_context(self, idx: Sequence[int]) -> AcousticContext:
        frames = [self.contexts[i] for i in idx]
        n = max(len(f) for f in frames)
        out = torch.zeros(len(idx), n, frames[0].shape[1])
        mask = torch.zeros(len(idx), n, dtype=torch.bool)
        for j, f in enumerate(frames):
            out[j, : len(f)] = f
            mask[j, : len(f)] = True
        return AcousticContext(out, mask)


def encode_all(encoder: AcousticEncoder, utts, spec: D.SynthSpec, variant: int | None = None, batch: int = 64):
    feats = [D.utterance_features(u, spec, variant)[0] for u in utts]
    out: list = [None] * len(feats)
    order = np.argsort([len(f) for f in feats], kind="stable")  # length-sorted batches waste little padding
    with torch.no_grad():
        for s in range(0, len(order), batch):
            idx = order[s : s + batch]
            f, m = batch_features([feats[i] for i in idx], encoder.cfg.max_frames)
            enc = encoder(f, m)
            for j, i in enumerate(idx):
                out[i] = enc[j, : len(feats[i])].clone()
    return out


def paired_set(encoder: AcousticEncoder, utts, spec: D.SynthSpec, max_len: int) -> PairedSet:
    canvases = torch.as_tensor(np.stack([D.tokenize(u.transcript, max_len) for u in utts]))
    return PairedSet(list(utts), canvases, encode_all(encoder, utts, spec))


# ---------------------------------------------------------------------------
# Generic trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_state: dict[str, torch.Tensor]
    sampled_t: list[float] = field(default_factory=list)
    lr_trace: list[dict[str, float]] = field(default_factory=list)


def fit(
    model: nn.Module,
    n_train: int,
    cfg: StageConfig,
    batch_loss: Callable[[list[int], np.random.Generator, int], torch.Tensor],
    validate: Callable[[], dict],
    group_of: dict[str, str] | None = None,
    group_scale: dict[str, float] | None = None,
    frozen_check: Callable[[], None] | None = None,
    on_epoch_start: Callable[[int], None] | None = None,
    log_path: Path | None = None,
    label: str = "",
) -> TrainResult:
    """Shared epoch loop: AdamW, warmup-cosine LR, early stopping on ``val_loss``.

    ``batch_loss(indices, rng, epoch)`` returns the loss for one mini-batch.
    ``validate()`` returns a dict that must contain ``val_loss``. The best
    epoch's parameters are kept and restored before returning.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not named:
        raise ContractViolation("no trainable parameters")
    steps_per_epoch = max(1, math.ceil(n_train / cfg.batch_size))
    total = cfg.max_epochs if cfg.schedule_unit == "epoch" else cfg.max_epochs * steps_per_epoch
    plan = LrPlan(cfg.base_lr, cfg.warmup_ratio, total, per_group_scale=dict(group_scale or {}))
    state = OptimState()
    stopper = EarlyStopping(cfg.patience)
    result = TrainResult([], -1, {})
    group_of = group_of or {}
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    step = 0
    try:
        first = validate()
        record = {"epoch": 0, "train_loss": None, **first, "lr": 0.0, "wall_s": 0.0, "label": label}
        result.log.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
        stopper.update(first["val_loss"], 0)
        result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        result.best_epoch = 0

        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            if on_epoch_start:
                on_epoch_start(epoch)
            rng = stream(cfg.seed, "train", cfg.stage, epoch)
            order = rng.permutation(n_train)
            losses = []
            model.train()
            for s in range(0, n_train, cfg.batch_size):
                idx = order[s : s + cfg.batch_size].tolist()
                pos = (epoch - 0.5) if cfg.schedule_unit == "epoch" else step + 0.5
                lrs = {n: lr_at(plan, pos, group_of.get(n)) for n, _ in named}
                for _, p in named:
                    p.grad = None
                loss = batch_loss(idx, rng, epoch)
                if not torch.isfinite(loss):
                    raise NumericFault(f"non-finite training loss at epoch {epoch}")
                loss.backward()
                adamw_step(named, state, lrs, weight_decay=cfg.weight_decay)
                result.lr_trace.append({g: lr_at(plan, pos, g) for g in set(group_of.values())} or {"*": lrs[named[0][0]]})
                losses.append(loss.item())
                step += 1
            model.eval()
            if frozen_check:
                frozen_check()
            val = validate()
            improved = stopper.update(val["val_loss"], epoch)
            if improved:
                result.best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                result.best_epoch = epoch
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                **val,
                "lr": lr_at(plan, min(pos, total)),
                "wall_s": round(time.perf_counter() - t0, 3),
                "label": label,
            }
            result.log.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            log.info("%s epoch %d train %.4f val %.4f", label, epoch, record["train_loss"], val["val_loss"])
            if stopper.should_stop:
                break
    finally:
        if log_file:
            log_file.close()
    model.load_state_dict(result.best_state)
    return result


def _trainable_digest_guard(model: nn.Module, names: Sequence[str]):
    params = dict(model.named_parameters())
    ref = tensor_digest((n, params[n]) for n in names)

    def check():
        if tensor_digest((n, params[n]) for n in names) != ref:
            raise ContractViolation("a frozen parameter group changed during training")

    return check, ref


# ---------------------------------------------------------------------------
# Stage 0: surrogate encoder
# ---------------------------------------------------------------------------


def _frame_batches(utts, spec, variant):
    feats, labels, index = [], [], []
    for u in utts:
        f, l = D.utterance_features(u, spec, variant)
        feats.append(f)
        labels.append(l)
        index.append(D.frame_char_index(u, spec, variant))
    return feats, labels, index


def pretrain_encoder(
    train: Sequence[D.Utterance],
    dev: Sequence[D.Utterance],
    spec: D.SynthSpec,
    model_cfg: ModelConfig,
    cfg: StageConfig,
    shuffle_labels: bool = False,
    log_path: Path | None = None,
) -> tuple[AcousticEncoder, TrainResult]:
    """Train encoder + throwaway frame heads; returns the encoder only (frozen).

    Per-frame targets: the character being rendered, that character's index in
    the transcript, and whether the frame starts a new character. The boundary
    target trains the encoder's counter; the index target gives frames a
    transcript position the decoder's adapters can look up.
    """
    wrapper = nn.Module()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(model_cfg.init_seed)
        wrapper.encoder = AcousticEncoder(model_cfg)
        wrapper.frame_head = nn.Linear(model_cfg.d_model, model_cfg.vocab_size)
        wrapper.index_head = nn.Linear(model_cfg.d_model, model_cfg.max_canvas_len)

    def training_frames(variant):
        feats, labels, index = _frame_batches(train, spec, variant)
        if shuffle_labels:
            flat = stream(cfg.seed, "shuffled-labels", variant or 0).permutation(np.concatenate(labels))
            labels = np.split(flat, np.cumsum([len(l) for l in labels])[:-1])
        return feats, labels, index

    data = list(training_frames(None))
    dev_feats, dev_labels, dev_index = _frame_batches(dev, spec, None)

    def targets(ls, m):
        y = torch.full(m.shape, -100, dtype=torch.long)
        for j, l in enumerate(ls):
            y[j, : len(l)] = torch.as_tensor(l)
        return y[m]

    def frame_loss(fs, ls, ix):
        f, m = batch_features(fs, model_cfg.max_frames)
        y, yi = targets(ls, m), targets(ix, m)
        h, b_logits, _ = wrapper.encoder(f, m, return_boundary=True)
        h = h[m]
        starts = torch.ones_like(m, dtype=h.dtype)
        full = torch.zeros(m.shape, dtype=torch.long)
        full[m] = yi
        starts[:, 1:] = (full[:, 1:] != full[:, :-1]).to(h.dtype)
        logits, idx_logits = wrapper.frame_head(h), wrapper.index_head(h)
        loss = (
            F.cross_entropy(logits, y)
            + F.cross_entropy(idx_logits, yi)
            + F.binary_cross_entropy_with_logits(b_logits[m], starts[m])
        )
        return loss, (logits.argmax(-1) == y).float().mean(), (idx_logits.argmax(-1) == yi).float().mean()

    def batch_loss(idx, rng, epoch):
        feats, labels, index = data
        return frame_loss([feats[i] for i in idx], [labels[i] for i in idx], [index[i] for i in idx])[0]

    def resynth(epoch):
        # fresh durations and noise every epoch; the transcripts stay fixed
        if cfg.augment:
            data[:] = training_frames(epoch)

    def validate():
        with torch.no_grad():
            loss, acc, idx_acc = frame_loss(dev_feats, dev_labels, dev_index)
        return {"val_loss": loss.item(), "val_frame_acc": acc.item(), "val_index_acc": idx_acc.item()}

    result = fit(
        wrapper, len(train), cfg, batch_loss, validate, on_epoch_start=resynth, log_path=log_path, label="stage0e-surrogate-encoder"
    )
    encoder = wrapper.encoder
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder, result


def probe_accuracy(
    encoder: AcousticEncoder,
    train: Sequence[D.Utterance],
    dev: Sequence[D.Utterance],
    spec: D.SynthSpec,
    steps: int = 300,
    shuffle_labels: bool = False,
    seed: int = 0,
) -> float:
    """Fit a fresh linear frame classifier on frozen encoder outputs; dev accuracy."""

    def frames(utts, shuffle):
        enc = encode_all(encoder, list(utts), spec)
        y = np.concatenate([D.utterance_features(u, spec)[1] for u in utts])
        if shuffle:
            y = stream(seed, "probe-shuffle").permutation(y)
        return torch.cat(enc), torch.as_tensor(y)

    x, y = frames(train, shuffle_labels)
    xd, yd = frames(dev, False)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        probe = nn.Linear(x.shape[1], encoder.cfg.vocab_size)
    opt = torch.optim.Adam(probe.parameters(), lr=1e-2)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(probe(x), y).backward()
        opt.step()
    with torch.no_grad():
        return (probe(xd).argmax(-1) == yd).float().mean().item()


# ---------------------------------------------------------------------------
# Stage 0: surrogate text decoder
# ---------------------------------------------------------------------------


def _text_canvases(texts: Sequence[str], max_len: int) -> torch.Tensor:
    return torch.as_tensor(np.stack([D.tokenize(t, max_len) for t in texts]))


def _val_masks(canvases: torch.Tensor, lo: float, hi: float, seed: int, tag: str):
    rng = stream(seed, "val-masks", tag)
    t = rng.uniform(lo, hi, size=len(canvases))
    t = np.maximum(t, 1e-3)
    masked, mask = corrupt_bernoulli_batch(canvases.numpy(), t, rng)
    return torch.as_tensor(masked), torch.as_tensor(mask), torch.as_tensor(t, dtype=torch.float32)


def masked_loss(
    model: DiffusionASR,
    canvases: torch.Tensor,
    masked: torch.Tensor,
    mask: torch.Tensor,
    t: torch.Tensor,
    ctx: AcousticContext | None,
    conditioning: bool,
) -> torch.Tensor:
    logits = model.decoder(masked, ctx, conditioning)
    return mdm_loss(logits, canvases, mask, t)


def pretrain_decoder_text(
    texts: Sequence[str],
    dev_texts: Sequence[str],
    model_cfg: ModelConfig,
    cfg: StageConfig,
    log_path: Path | None = None,
) -> tuple[DiffusionASR, TrainResult]:
    """Unconditional masked denoising on transcripts (adapters bypassed)."""
    model = DiffusionASR(model_cfg)
    part = partition(model)
    set_trainable(model, part, {"decoder_body"})
    canv = _text_canvases(texts, model_cfg.max_canvas_len)
    dev = _text_canvases(dev_texts, model_cfg.max_canvas_len)
    vmasked, vmask, vt = _val_masks(dev, 0.0, 1.0, cfg.seed, "0d")

    def batch_loss(idx, rng, epoch):
        y0 = canv[idx]
        t = np.maximum(sample_t(1, rng, size=len(idx)), 1e-3)
        masked, mask = corrupt_bernoulli_batch(y0.numpy(), t, rng)
        return masked_loss(model, y0, torch.as_tensor(masked), torch.as_tensor(mask), torch.as_tensor(t, dtype=torch.float32), None, False)

    def validate():
        with torch.no_grad():
            loss = _chunked_loss(model, dev, vmasked, vmask, vt, None, False)
        return {"val_loss": loss}

    result = fit(model, len(canv), cfg, batch_loss, validate, log_path=log_path, label="stage0d-surrogate-decoder")
    return model, result


def _chunked_loss(model, canvases, masked, mask, t, data: PairedSet | None, conditioning, chunk=128) -> float:
    total = 0.0
    n = len(canvases)
    for s in range(0, n, chunk):
        idx = list(range(s, min(n, s + chunk)))
        ctx = data.batch_context(idx) if data is not None else None
        loss = masked_loss(model, canvases[idx], masked[idx], mask[idx], t[idx], ctx, conditioning)
        total += loss.item() * len(idx)
    return total / n


def fill_accuracy(model: DiffusionASR, texts: Sequence[str], ratio: float = 0.1, seed: int = 0) -> float:
    """Mask ``ratio`` of each transcript's characters; fraction restored by one argmax pass."""
    cfg = model.cfg
    canv = _text_canvases(texts, cfg.max_canvas_len).numpy()
    rng = stream(seed, "fill")
    masked = canv.copy()
    mask = np.zeros_like(canv, dtype=bool)
    for i, t in enumerate(texts):
        n = max(1, int(round(ratio * len(t))))
        mask[i, rng.permutation(len(t))[:n]] = True
    masked[mask] = cfg.mask_id
    with torch.no_grad():
        logits = model.decoder(torch.as_tensor(masked), None, conditioning=False)
    logits[..., cfg.mask_id] = float("-inf")
    pred = logits.argmax(-1).numpy()
    return float((pred[mask] == canv[mask]).mean())


# ---------------------------------------------------------------------------
# Stages 1 and 2
# ---------------------------------------------------------------------------


def assemble(encoder_state: dict, decoder_state: dict, model_cfg: ModelConfig) -> DiffusionASR:
    """Fresh model (new adapters) carrying stage-0 encoder and decoder weights."""
    model = DiffusionASR(model_cfg)
    own = model.state_dict()
    for name, value in {**encoder_state, **decoder_state}.items():
        if name not in own:
            raise KeyError(f"unexpected parameter {name}")
        if ".cross_attn." in name:
            continue
        own[name] = value
    model.load_state_dict(own)
    return model


def decode_wer(model: DiffusionASR, data: PairedSet, n: int, conditioning: bool = True, seed: int = 0) -> dict:
    """Pooled WER/CER of 4-step single-sequence decoding on the first ``n`` items."""
    pairs = []
    for i in range(min(n, len(data))):
        ctx = data.batch_context([i])
        res = decode_single(model, ctx, seed=seed, utt_key=data.utts[i].id, conditioning=conditioning)
        pairs.append((res.transcript, data.utts[i].transcript))
    return {
        "val_wer": metrics.corpus_error_rate(pairs, "word")["pooled"],
        "val_cer": metrics.corpus_error_rate(pairs, "char")["pooled"],
    }


def _finetune(
    model: DiffusionASR,
    train: PairedSet,
    dev: PairedSet,
    cfg: StageConfig,
    encoder: AcousticEncoder | None,
    spec: D.SynthSpec | None,
    log_path: Path | None,
    llrd: bool,
) -> TrainResult:
    part = partition(model)
    set_trainable(model, part, cfg.roles_trainable)
    frozen = part.names_for({"encoder", "adapter", "decoder_body"} - cfg.roles_trainable)
    check, _ = _trainable_digest_guard(model, frozen)
    group_of = part.group_of()
    scales = llrd_scales(part, cfg.llrd_gamma) if llrd and cfg.llrd_gamma else {}
    stage_no = 2 if cfg.stage == "2" else 1
    vmasked, vmask, vt = _val_masks(dev.canvases, cfg.mask_low, cfg.mask_high, cfg.seed, cfg.stage)
    sampled: list[float] = []

    def batch_loss(idx, rng, epoch):
        y0 = train.canvases[idx]
        t = sample_t(stage_no, rng, size=len(idx))
        sampled.extend(t.tolist())
        masked, mask = corrupt_bernoulli_batch(y0.numpy(), np.maximum(t, 1e-3), rng)
        ctx = train.batch_context(idx)
        return masked_loss(
            model, y0, torch.as_tensor(masked), torch.as_tensor(mask), torch.as_tensor(np.maximum(t, 1e-3), dtype=torch.float32), ctx, True
        )

    def validate():
        with torch.no_grad():
            out = {"val_loss": _chunked_loss(model, dev.canvases, vmasked, vmask, vt, dev, True)}
            if cfg.val_wer_utts:
                out.update(decode_wer(model, dev, cfg.val_wer_utts))
        return out

    def resynth(epoch):
        if cfg.augment and encoder is not None:
            train.contexts = encode_all(encoder, train.utts, spec, variant=epoch)

    label = "stage1-adapter" if cfg.stage == "1" else "stage2-full-decoder"
    result = fit(model, len(train), cfg, batch_loss, validate, group_of, scales, check, resynth, log_path, label)
    if cfg.augment and encoder is not None:
        train.contexts = encode_all(encoder, train.utts, spec)
    result.sampled_t = sampled
    check()
    return result


def train_stage1(model, train: PairedSet, dev: PairedSet, cfg: StageConfig, encoder=None, spec=None, log_path=None) -> TrainResult:
    """Adapters only, masking ratio t ~ U(0, 1); encoder and decoder body verified frozen each epoch."""
    if cfg.stage != "1":
        raise ValueError("stage-1 config required")
    return _finetune(model, train, dev, cfg, encoder, spec, log_path, llrd=False)


def train_stage2(model, train: PairedSet, dev: PairedSet, cfg: StageConfig, encoder=None, spec=None, log_path=None) -> TrainResult:
    """Adapters + decoder body with layer-wise LR decay, masking ratio t ~ U(0.7, 1.0)."""
    if cfg.stage != "2":
        raise ValueError("stage-2 config required")
    return _finetune(model, train, dev, cfg, encoder, spec, log_path, llrd=True)


def conditioned_vs_ablated_loss(model: DiffusionASR, dev: PairedSet, seed: int = 0) -> tuple[float, float]:
    vmasked, vmask, vt = _val_masks(dev.canvases, 0.0, 1.0, seed, "ablation-check")
    with torch.no_grad():
        on = _chunked_loss(model, dev.canvases, vmasked, vmask, vt, dev, True)
        off = _chunked_loss(model, dev.canvases, vmasked, vmask, vt, dev, False)
    return on, off


# ---------------------------------------------------------------------------
# Autoregressive baseline training
# ---------------------------------------------------------------------------


def train_ar(
    encoder_state: dict,
    train: PairedSet,
    dev: PairedSet,
    model_cfg: ModelConfig,
    cfg: StageConfig,
    log_path: Path | None = None,
) -> tuple[ArModel, TrainResult]:
    """Teacher-forced next-token training of the AR decoder on the frozen encoder."""
    model = ArModel(model_cfg)
    model.encoder.load_state_dict({k[len("encoder."):]: v for k, v in encoder_state.items()})
    for name, p in model.named_parameters():
        p.requires_grad_(not name.startswith("encoder."))
    frozen = [n for n, _ in model.named_parameters() if n.startswith("encoder.")]
    check, _ = _trainable_digest_guard(model, frozen)

    def batch_loss(idx, rng, epoch):
        return ar_loss(model, train.canvases[idx], train.batch_context(idx))[0]

    def validate():
        losses, accs, n = 0.0, 0.0, 0
        with torch.no_grad():
            for s in range(0, len(dev), 128):
                idx = list(range(s, min(len(dev), s + 128)))
                loss, acc = ar_loss(model, dev.canvases[idx], dev.batch_context(idx))
                losses += loss.item() * len(idx)
                accs += acc.item() * len(idx)
                n += len(idx)
        return {"val_loss": losses / n, "val_token_acc": accs / n}

    result = fit(model, len(train), cfg, batch_loss, validate, frozen_check=check, log_path=log_path, label="ar-baseline")
    for p in model.parameters():
        p.requires_grad_(False)
    return model, result


def stage_config_dict(cfg: StageConfig) -> dict:
    return asdict(cfg)

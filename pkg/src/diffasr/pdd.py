"""Parallel multi-candidate diffusion decoding.

Step 1 samples ``k`` canvases from one forward pass on the fully masked
canvas; each later step remasks a fixed fraction of every candidate at random
and re-predicts those positions for all candidates in a single batched
forward; finally the candidate with the highest mean token confidence wins.

Randomness is keyed by ``(seed, utterance, candidate, step)`` so candidate
``j`` follows the same trajectory whatever ``k`` is: the first five candidates
of a ``k=15`` run are exactly the ``k=5`` run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import eval as metrics
from .data import canvas_to_text
from .diffusion import fraction_positions
from .model import AcousticContext, DiffusionASR
from .numerics import stream

STANDARD_SCHEDULE = (1.0, 0.9, 0.85, 0.8)
AGGRESSIVE_SCHEDULE = (1.0, 0.7, 0.5, 0.3)
STEP_SCHEDULES = {
    2: (1.0, 0.85),
    3: (1.0, 0.9, 0.8),
    4: STANDARD_SCHEDULE,
    5: (1.0, 0.95, 0.9, 0.85, 0.8),
    6: (1.0, 0.96, 0.92, 0.88, 0.84, 0.8),
    8: (1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65),
}
NAMED_SCHEDULES = {
    "standard": STANDARD_SCHEDULE,
    "conservative-a": (1.0, 0.98, 0.95, 0.9),
    "conservative-b": (1.0, 0.95, 0.9, 0.85),
    "aggressive-a": (1.0, 0.85, 0.7, 0.6),
    "aggressive-b": AGGRESSIVE_SCHEDULE,
}


@dataclass
class PddConfig:
    k: int = 15
    schedule: tuple[float, ...] = STANDARD_SCHEDULE
    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(float(r) for r in self.schedule)
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.schedule or self.schedule[0] != 1.0:
            raise ValueError("schedule must start with 1.0 (the generation step)")
        if any(not 0.0 < r <= 1.0 for r in self.schedule):
            raise ValueError("schedule fractions must lie in (0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def n_steps(self) -> int:
        return len(self.schedule)


@dataclass
class CandidateBatch:
    canvases: np.ndarray
    last_pred_prob: np.ndarray
    pad_id: int

    @property
    def k(self) -> int:
        return len(self.canvases)

    @property
    def confidences(self) -> np.ndarray:
        keep = self.canvases != self.pad_id
        total = (self.last_pred_prob * keep).sum(axis=1)
        n = keep.sum(axis=1)
        return np.where(n > 0, total / np.maximum(n, 1), 0.0)

    def texts(self) -> list[str]:
        return [canvas_to_text(c) for c in self.canvases]


@dataclass
class StepTrace:
    step: int
    mask_fraction: float
    mean_confidence: float
    tokens_changed: float
    candidate_wers: list[float] | None = None


@dataclass
class PddResult:
    transcript: str
    batch: CandidateBatch
    selected: int
    trace: list[StepTrace]
    decoder_calls: int
    candidate_texts: list[str] = field(default_factory=list)


def _probs(logits: torch.Tensor, mask_id: int, temperature: float = 1.0) -> np.ndarray:
    logits = logits.double().clone()
    logits[..., mask_id] = float("-inf")
    return torch.softmax(logits / temperature, dim=-1).numpy()


def _forward(model: DiffusionASR, canvases: np.ndarray, ctx: AcousticContext, conditioning: bool) -> torch.Tensor:
    with torch.no_grad():
        return model.decoder(torch.as_tensor(canvases), ctx, conditioning)


def batch_generate(
    model: DiffusionASR,
    ctx: AcousticContext,
    k: int,
    temperature: float = 1.0,
    seed: int = 0,
    utt_key: int | str = 0,
    greedy: bool = False,
    conditioning: bool = True,
) -> CandidateBatch:
    """One forward pass on the fully masked canvas, then ``k`` position-wise samples.

    The masked canvases are identical, so the pass runs on a single row and the
    distribution is shared by all candidates. ``greedy`` takes the argmax
    instead (the zero-temperature limit).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if not greedy and temperature <= 0:
        raise ValueError("temperature must be positive")
    cfg = model.cfg
    start = np.full((1, cfg.max_canvas_len), cfg.mask_id, dtype=np.int64)
    logits = _forward(model, start, ctx, conditioning)[0]
    positions = np.arange(cfg.max_canvas_len)
    if greedy:
        probs = _probs(logits, cfg.mask_id)
        tok = probs.argmax(axis=1)
        canvases = np.repeat(tok[None], k, axis=0)
        last = np.repeat(probs[positions, tok][None], k, axis=0)
        return CandidateBatch(canvases, last, cfg.pad_id)
    probs = _probs(logits, cfg.mask_id, temperature)
    cdf = np.cumsum(probs, axis=1)
    canvases = np.empty((k, cfg.max_canvas_len), dtype=np.int64)
    last = np.empty((k, cfg.max_canvas_len))
    for j in range(k):
        u = stream(seed, utt_key, j, 1).random(cfg.max_canvas_len) * cdf[:, -1]
        tok = (cdf < u[:, None]).sum(axis=1)
        tok = np.minimum(tok, probs.shape[1] - 1)
        canvases[j] = tok
        last[j] = probs[positions, tok]
    return CandidateBatch(canvases, last, cfg.pad_id)


def refine_step(
    model: DiffusionASR,
    batch: CandidateBatch,
    rho: float,
    ctx: AcousticContext,
    seed: int = 0,
    utt_key: int | str = 0,
    step: int = 2,
    conditioning: bool = True,
) -> CandidateBatch:
    """Remask ``round(rho * L)`` random positions per candidate and re-predict them (argmax)."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    cfg = model.cfg
    k, length = batch.canvases.shape
    masks = np.zeros((k, length), dtype=bool)
    for j in range(k):
        masks[j, fraction_positions(length, rho, stream(seed, utt_key, j, step))] = True
    masked = np.where(masks, cfg.mask_id, batch.canvases)
    probs = _probs(_forward(model, masked, ctx, conditioning), cfg.mask_id)
    best = probs.argmax(axis=2)
    best_p = np.take_along_axis(probs, best[..., None], axis=2)[..., 0]
    canvases = np.where(masks, best, batch.canvases)
    last = np.where(masks, best_p, batch.last_pred_prob)
    return CandidateBatch(canvases, last, batch.pad_id)


def select(batch: CandidateBatch) -> int:
    """Index of the most confident candidate; the lowest index wins ties."""
    return int(np.argmax(batch.confidences))


def oracle_wer(candidates: Sequence[str], reference: str) -> tuple[float, int]:
    """Best achievable WER among ``candidates`` and the first index achieving it."""
    wers = [metrics.wer(c, reference) for c in candidates]
    idx = int(np.argmin(wers))
    return wers[idx], idx


def _trace_entry(step, rho, batch, prev, reference):
    changed = float((batch.canvases != prev).mean())
    wers = [metrics.wer(t, reference) for t in batch.texts()] if reference is not None else None
    return StepTrace(step, rho, float(batch.confidences.mean()), changed, wers)


def decode_pdd(
    model: DiffusionASR,
    ctx: AcousticContext,
    cfg: PddConfig,
    reference: str | None = None,
    utt_key: int | str = 0,
    conditioning: bool = True,
    greedy: bool = False,
) -> PddResult:
    calls0 = model.decoder.calls
    start = np.full((cfg.k, model.cfg.max_canvas_len), model.cfg.mask_id, dtype=np.int64)
    batch = batch_generate(model, ctx, cfg.k, cfg.temperature, cfg.rng_seed, utt_key, greedy, conditioning)
    trace = [_trace_entry(1, cfg.schedule[0], batch, start, reference)]
    for step, rho in enumerate(cfg.schedule[1:], start=2):
        prev = batch.canvases
        batch = refine_step(model, batch, rho, ctx, cfg.rng_seed, utt_key, step, conditioning)
        trace.append(_trace_entry(step, rho, batch, prev, reference))
    best = select(batch)
    texts = batch.texts()
    return PddResult(texts[best], batch, best, trace, model.decoder.calls - calls0, texts)


def decode_single(
    model: DiffusionASR,
    ctx: AcousticContext,
    schedule: Sequence[float] = STANDARD_SCHEDULE,
    seed: int = 0,
    utt_key: int | str = 0,
    conditioning: bool = True,
    reference: str | None = None,
) -> PddResult:
    """Single-sequence baseline: one argmax candidate refined over ``schedule``."""
    cfg = PddConfig(k=1, schedule=tuple(schedule), rng_seed=seed)
    return decode_pdd(model, ctx, cfg, reference, utt_key, conditioning, greedy=True)


def utterance_record(utt_id: str, reference: str, result: PddResult) -> dict:
    """Line-delimited record: transcript, per-candidate scores, selection vs oracle, trace."""
    cand_wers = [metrics.wer(t, reference) for t in result.candidate_texts]
    oracle_idx = int(np.argmin(cand_wers))
    return {
        "id": utt_id,
        "reference": reference,
        "transcript": result.transcript,
        "wer": cand_wers[result.selected],
        "cer": metrics.cer(result.transcript, reference),
        "confidence": float(result.batch.confidences[result.selected]),
        "candidate_confidences": [float(c) for c in result.batch.confidences],
        "candidate_wers": cand_wers,
        "selected_index": result.selected,
        "oracle_index": oracle_idx,
        "selected_wer": cand_wers[result.selected],
        "oracle_wer": cand_wers[oracle_idx],
        "ref_len": len(metrics.normalize(reference)),
        "hyp_len": len(metrics.normalize(result.transcript)),
        "decoder_calls": result.decoder_calls,
        "trace": [
            {
                "step": s.step,
                "mask_fraction": s.mask_fraction,
                "mean_confidence": s.mean_confidence,
                "tokens_changed": s.tokens_changed,
                "candidate_wers": s.candidate_wers,
            }
            for s in result.trace
        ],
    }

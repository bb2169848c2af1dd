"""Masking corruption and the 1/t-weighted masked cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import MASK_ID
from .errors import ContractViolation

STAGE_T_RANGE = {1: (0.0, 1.0), 2: (0.7, 1.0)}


@dataclass
class MaskedSequence:
    canvas: np.ndarray
    mask: np.ndarray
    origin_ratio: float

    @property
    def mask_set(self) -> set[int]:
        return set(np.flatnonzero(self.mask).tolist())


def sample_t(stage: int, rng: np.random.Generator, size: int | None = None):
    """Masking ratio: U(0, 1) in stage 1, U(0.7, 1.0) in stage 2."""
    lo, hi = STAGE_T_RANGE[stage]
    return rng.uniform(lo, hi, size=size)


def corrupt_bernoulli(y0: np.ndarray, t: float, rng: np.random.Generator, mask_id: int = MASK_ID) -> MaskedSequence:
    mask = rng.random(y0.shape[-1]) < t
    canvas = np.where(mask, mask_id, y0)
    return MaskedSequence(canvas, mask, float(t))


def corrupt_bernoulli_batch(y0: np.ndarray, t: np.ndarray, rng: np.random.Generator, mask_id: int = MASK_ID):
    """Row-wise Bernoulli masking with one ratio per sample; returns ``(canvas, mask)``."""
    mask = rng.random(y0.shape) < np.asarray(t)[:, None]
    return np.where(mask, mask_id, y0), mask


def fraction_positions(length: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"mask fraction {rho} outside [0, 1]")
    n = int(round(rho * length))
    return rng.permutation(length)[:n]


def corrupt_fraction(y: np.ndarray, rho: float, rng: np.random.Generator, mask_id: int = MASK_ID) -> MaskedSequence:
    """Mask exactly ``round(rho * len(y))`` positions chosen without replacement."""
    pos = fraction_positions(len(y), rho, rng)
    mask = np.zeros(len(y), dtype=bool)
    mask[pos] = True
    return MaskedSequence(np.where(mask, mask_id, y), mask, float(rho))


def mdm_loss(logits: torch.Tensor, y0: torch.Tensor, mask: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """``mean_b (1/t_b) * sum_{i masked} -log p(y0[b, i])``.

    ``logits [B, L, V]``, ``y0 [B, L]``, ``mask [B, L]`` bool, ``t [B]``. Only
    masked positions enter the graph, so unmasked rows get exactly zero
    gradient. Samples with no masked positions contribute zero.
    """
    if logits.dim() == 2:
        logits, y0, mask = logits[None], y0[None], mask[None]
        t = torch.as_tensor(t, dtype=logits.dtype).reshape(1)
    t = torch.as_tensor(t, dtype=logits.dtype)
    counts = mask.sum(dim=1)
    if bool(((t <= 0) & (counts > 0)).any()):
        raise ContractViolation("masking ratio t must be positive when positions are masked")
    b_idx, i_idx = mask.nonzero(as_tuple=True)
    if b_idx.numel() == 0:
        return logits.sum() * 0.0
    nll = F.cross_entropy(logits[b_idx, i_idx], y0[b_idx, i_idx], reduction="none")
    weighted = nll / t[b_idx]
    return weighted.sum() / logits.shape[0]

"""Size-matched autoregressive baseline on the same frozen encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import canvas_to_text
from .model import (
    AcousticContext,
    AcousticEncoder,
    DecoderBlock,
    ModelConfig,
    _init_weights,
    encode,
)


def bos_id(cfg: ModelConfig) -> int:
    # the mask symbol never occurs in AR inputs, so it doubles as start-of-sequence
    return cfg.mask_id


class ArDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_canvas_len, cfg.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_dec_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.calls = 0

    def forward(self, tokens: torch.Tensor, ctx: AcousticContext) -> torch.Tensor:
        """Teacher-forced logits for every prefix position (causal self-attention)."""
        n = tokens.shape[1]
        causal = torch.full((n, n), float("-inf"), dtype=self.pos_emb.weight.dtype).triu(1)
        x = self.tok_emb(tokens) + self.pos_emb.weight[:n]
        for block in self.blocks:
            x = block(x, ctx, True, causal)
        return self.head(self.norm(x))

    def step(self, token: torch.Tensor, pos: int, ctx: AcousticContext, cache: list) -> torch.Tensor:
        """Logits for the next token given one new input token; extends ``cache`` in place."""
        self.calls += 1
        x = self.tok_emb(token)[:, None, :] + self.pos_emb.weight[pos]
        for i, block in enumerate(self.blocks):
            h = block.norm(x)
            k, v = block.self_attn.project_kv(h)
            if len(cache) <= i:
                cache.append((k, v))
            else:
                pk, pv = cache[i]
                cache[i] = (torch.cat([pk, k], dim=2), torch.cat([pv, v], dim=2))
            x = x + block.self_attn(h, cache[i])
            x = x + block.cross_attn(x, ctx)
            x = x + block.ffn(x)
        return self.head(self.norm(x))[:, 0]


class ArModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed + 1)
            self.encoder = AcousticEncoder(cfg)
            self.ar = ArDecoder(cfg)
            _init_weights(self)

    def encode(self, features) -> AcousticContext:
        return encode(self.encoder, features)


def teacher_forcing_inputs(canvases: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    bos = torch.full((canvases.shape[0], 1), bos_id(cfg), dtype=canvases.dtype)
    return torch.cat([bos, canvases[:, :-1]], dim=1)


def ar_loss(model: ArModel, canvases: torch.Tensor, ctx: AcousticContext) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean next-token cross-entropy over transcript + eos positions, and token accuracy."""
    logits = model.ar(teacher_forcing_inputs(canvases, model.cfg), ctx)
    keep = canvases != model.cfg.pad_id
    loss = F.cross_entropy(logits[keep], canvases[keep])
    acc = (logits[keep].argmax(-1) == canvases[keep]).float().mean()
    return loss, acc


@dataclass
class ArResult:
    transcript: str
    tokens: list[int]
    call_count: int


def greedy_decode(model: ArModel, ctx: AcousticContext, max_len: int | None = None) -> ArResult:
    """Emit argmax tokens until eos or ``max_len`` model calls."""
    cfg = model.cfg
    max_len = cfg.max_canvas_len if max_len is None else min(max_len, cfg.max_canvas_len)
    calls0 = model.ar.calls
    cache: list = []
    token = torch.tensor([bos_id(cfg)])
    out: list[int] = []
    with torch.no_grad():
        for pos in range(max_len):
            logits = model.ar.step(token, pos, ctx, cache)
            logits[:, cfg.mask_id] = float("-inf")
            nxt = int(logits.argmax(-1))
            out.append(nxt)
            if nxt == cfg.eos_id:
                break
            token = torch.tensor([nxt])
    return ArResult(canvas_to_text(np.array(out)), out, model.ar.calls - calls0)

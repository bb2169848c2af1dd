"""Toy acoustic encoder + masked-diffusion decoder with per-block cross-attention adapters."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data
from .errors import CapacityError, SchemaError

ROLES = ("encoder", "adapter", "decoder_body")


@dataclass
class ModelConfig:
    vocab_size: int = data.VOCAB_SIZE
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 6
    ffn_mult: int = 2
    max_canvas_len: int = 64
    max_frames: int = 192
    d_feat: int = 24
    mask_id: int = data.MASK_ID
    pad_id: int = data.PAD_ID
    eos_id: int = data.EOS_ID
    init_seed: int = 0

    def __post_init__(self):
        if len({self.mask_id, self.pad_id, self.eos_id}) != 3:
            raise ValueError("mask, pad and eos ids must be distinct")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("mask_id", "pad_id", "eos_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ValueError(f"{name} outside vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AcousticContext:
    """Encoder output for a batch: ``frames [B, F, d]`` and validity ``frame_mask [B, F]``."""

    frames: torch.Tensor
    frame_mask: torch.Tensor
    kv_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_frames(self) -> torch.Tensor:
        return self.frame_mask.sum(dim=1)

    def select(self, idx: Sequence[int]) -> "AcousticContext":
        idx = list(idx)
        return AcousticContext(self.frames[idx], self.frame_mask[idx])

    def padded(self, window: int) -> "AcousticContext":
        """Same context zero-padded to ``window`` frames. Padding is masked out of attention,
        so decoding is unchanged while cross-attention cost no longer depends on audio length."""
        b, n, d = self.frames.shape
        if n > window:
            raise CapacityError(f"{n} frames exceed the {window}-frame window")
        frames = torch.zeros(b, window, d, dtype=self.frames.dtype)
        mask = torch.zeros(b, window, dtype=torch.bool)
        frames[:, :n] = self.frames
        mask[:, :n] = self.frame_mask
        return AcousticContext(frames, mask)


def _mask_bias(key_mask: torch.Tensor | None, dtype) -> torch.Tensor | None:
    if key_mask is None:
        return None
    bias = torch.zeros(key_mask.shape, dtype=dtype)
    bias.masked_fill_(~key_mask, float("-inf"))
    return bias[:, None, None, :]


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model, bias=False)  # a shared key shift cancels in softmax
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def project_kv(self, mem: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.wk(mem)), self._split(self.wv(mem))

    def forward(
        self,
        x: torch.Tensor,
        kv: tuple[torch.Tensor, torch.Tensor],
        bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        q = self._split(self.wq(x))
        k, v = kv
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if bias is not None:
            scores = scores + bias
        weights = torch.softmax(scores, dim=-1)
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = weights @ v
        b, _, n, _ = out.shape
        return self.wo(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, mult * d_model)
        self.fc2 = nn.Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(self.norm(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_mult)

    def forward(self, x, bias):
        h = self.norm(x)
        x = x + self.self_attn(h, self.self_attn.project_kv(h), bias)
        return x + self.ffn(x)


class AcousticEncoder(nn.Module):
    """Conv front-end, transformer layers, then a character counter.

    A boundary head marks frames that start a new character. The running
    count of marked frames selects an index embedding that is added to every
    frame, so frames carry the transcript position they render: the alignment
    cue a pre-trained speech encoder would provide. The count is piecewise
    constant, so the boundary head learns only from its own pretraining target.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.front = nn.Conv1d(cfg.d_feat, cfg.d_model, kernel_size=3, padding=1)
        self.pos_emb = nn.Embedding(cfg.max_frames, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.boundary = nn.Linear(cfg.d_model, 1)
        self.index_emb = nn.Embedding(cfg.max_canvas_len, cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model)

    def forward(self, feats: torch.Tensor, frame_mask: torch.Tensor, return_boundary: bool = False):
        n = feats.shape[1]
        keep = frame_mask[..., None].to(feats.dtype)
        x = F.gelu(self.front((feats * keep).transpose(1, 2)).transpose(1, 2)) + self.pos_emb.weight[:n]
        bias = _mask_bias(frame_mask, x.dtype)
        for layer in self.layers:
            x = layer(x, bias)
        logits = self.boundary(x)[..., 0]
        count = ((logits > 0) & frame_mask).long().cumsum(dim=1) - 1
        x = x + self.index_emb(count.clamp(0, self.cfg.max_canvas_len - 1))
        out = self.norm(x) * keep
        return (out, logits, count) if return_boundary else out


class CrossAttentionAdapter(nn.Module):
    """Lets canvas positions attend to acoustic frames. Output projection starts at zero
    so inserting the adapter leaves a pre-trained decoder's function unchanged."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.n_heads)
        nn.init.zeros_(self.attn.wo.weight)
        nn.init.zeros_(self.attn.wo.bias)

    def forward(self, x: torch.Tensor, ctx: AcousticContext) -> torch.Tensor:
        key = id(self)
        kv = ctx.kv_cache.get(key) if not torch.is_grad_enabled() else None
        if kv is None:
            kv = self.attn.project_kv(ctx.frames)
            if not torch.is_grad_enabled():
                ctx.kv_cache[key] = kv
        return self.attn(self.norm(x), kv, _mask_bias(ctx.frame_mask, x.dtype))


class DecoderBlock(nn.Module):
    """Pre-norm block: self-attention -> cross-attention adapter -> feed-forward."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.n_heads)
        self.cross_attn = CrossAttentionAdapter(cfg)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_mult)

    def forward(self, x, ctx, conditioning: bool = True, self_bias=None, self_kv=None):
        h = self.norm(x)
        kv = self.self_attn.project_kv(h) if self_kv is None else self_kv
        x = x + self.self_attn(h, kv, self_bias)
        if conditioning:
            x = x + self.cross_attn(x, ctx)
        return x + self.ffn(x)


class DiffusionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_canvas_len, cfg.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_dec_layers))
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.calls = 0

    def forward(self, canvas: torch.Tensor, ctx: AcousticContext | None, conditioning: bool = True) -> torch.Tensor:
        if canvas.dim() != 2 or canvas.shape[1] != self.cfg.max_canvas_len:
            raise ValueError(f"canvas must be [B, {self.cfg.max_canvas_len}], got {tuple(canvas.shape)}")
        if int(canvas.max()) >= self.cfg.vocab_size or int(canvas.min()) < 0:
            raise ValueError("token id outside vocabulary")
        if conditioning and ctx is None:
            raise ValueError("conditioning requested without an acoustic context")
        self.calls += 1
        x = self.tok_emb(canvas) + self.pos_emb.weight
        for block in self.blocks:
            x = block(x, ctx, conditioning)
        return self.head(self.norm(x))


def _init_weights(module: nn.Module):
    for name, p in module.named_parameters():
        if name.endswith("cross_attn.attn.wo.weight") or name.endswith("cross_attn.attn.wo.bias"):
            continue
        if p.dim() >= 2:
            nn.init.normal_(p, std=0.02)
        elif name.endswith("bias"):
            nn.init.zeros_(p)


class DiffusionASR(nn.Module):
    """Frozen-encoder + diffusion-decoder network. Parameter names are the partition contract:
    ``encoder.*``, ``decoder.blocks.<i>.cross_attn.*`` (adapters), everything else decoder body."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.init_seed)
            self.encoder = AcousticEncoder(cfg)
            self.decoder = DiffusionDecoder(cfg)
            _init_weights(self)

    def encode(self, features: np.ndarray | Sequence[np.ndarray]) -> AcousticContext:
        return encode(self.encoder, features)

    def forward(self, canvas, ctx, conditioning: bool = True):
        return self.decoder(canvas, ctx, conditioning)


def batch_features(features: Sequence[np.ndarray], max_frames: int, dtype=torch.float32):
    n = max(len(f) for f in features)
    if n > max_frames:
        raise CapacityError(f"{n} frames exceed the encoder's {max_frames}")
    d = features[0].shape[1]
    feats = torch.zeros(len(features), n, d, dtype=dtype)
    mask = torch.zeros(len(features), n, dtype=torch.bool)
    for i, f in enumerate(features):
        feats[i, : len(f)] = torch.as_tensor(f, dtype=dtype)
        mask[i, : len(f)] = True
    return feats, mask


def encode(encoder: AcousticEncoder, features) -> AcousticContext:
    """Run the acoustic encoder on one ``[F, d_feat]`` matrix or a list of them."""
    if isinstance(features, np.ndarray) and features.ndim == 2:
        features = [features]
    dtype = encoder.front.weight.dtype
    feats, mask = batch_features(features, encoder.cfg.max_frames, dtype)
    return AcousticContext(encoder(feats, mask), mask)


# ---------------------------------------------------------------------------
# Parameter partition
# ---------------------------------------------------------------------------


@dataclass
class ParamPartition:
    groups: dict[str, list[str]]
    n_layers: int

    def role(self, group: str) -> str:
        return group.split(".")[0]

    def group_of(self) -> dict[str, str]:
        return {name: g for g, names in self.groups.items() for name in names}

    def names_for(self, roles: Iterable[str]) -> list[str]:
        roles = set(roles)
        return [n for g, names in self.groups.items() if self.role(g) in roles for n in names]

    @staticmethod
    def layer(group: str) -> int | None:
        parts = group.split(".")
        return int(parts[1]) if len(parts) == 2 else None


_BLOCK = re.compile(r"^(?:decoder|ar)\.blocks\.(\d+)\.(.*)$")


def partition(model: nn.Module, n_layers: int | None = None) -> ParamPartition:
    """Assign every parameter to ``encoder``, ``adapter.<l>`` or ``decoder_body.<l>``.

    Layers are numbered 1..L from the input side. Token/position embeddings go
    with layer 1 and the output norm/head with layer L.
    """
    if n_layers is None:
        n_layers = model.cfg.n_dec_layers
    groups: dict[str, list[str]] = {"encoder": []}
    for l in range(1, n_layers + 1):
        groups[f"adapter.{l}"] = []
        groups[f"decoder_body.{l}"] = []
    for name, _ in model.named_parameters():
        if name.startswith("encoder."):
            groups["encoder"].append(name)
            continue
        m = _BLOCK.match(name)
        if m:
            l = int(m.group(1)) + 1
            role = "adapter" if m.group(2).startswith("cross_attn.") else "decoder_body"
            groups[f"{role}.{l}"].append(name)
        elif re.match(r"^(decoder|ar)\.(tok_emb|pos_emb)\.", name):
            groups["decoder_body.1"].append(name)
        elif re.match(r"^(decoder|ar)\.(norm|head)\.", name):
            groups[f"decoder_body.{n_layers}"].append(name)
        else:
            raise SchemaError(f"cannot classify parameter {name!r}")
    return ParamPartition(groups, n_layers)


def set_trainable(model: nn.Module, part: ParamPartition, roles_on: Iterable[str]) -> None:
    roles_on = set(roles_on)
    unknown = roles_on - set(ROLES)
    if unknown:
        raise ValueError(f"unknown roles: {sorted(unknown)}")
    on = set(part.names_for(roles_on))
    for name, p in model.named_parameters():
        p.requires_grad_(name in on)
        if name not in on:
            p.grad = None


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

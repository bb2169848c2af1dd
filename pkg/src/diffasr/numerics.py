"""Numerical substrate: seeded streams, gradient checking, AdamW, LR plans, checkpoints.

Tensors and reverse-mode differentiation come from torch; everything the
training contract depends on (the optimizer update, the schedule, the
checkpoint byte layout) is implemented here so it can be tested directly.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import NumericFault, SchemaError

DTYPE = torch.float32
CHECKPOINT_VERSION = 1
_MAGIC = b"DASRCKPT"


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _key_part(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream key parts must be non-negative, got {part}")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path: int | str) -> np.random.Generator:
    """Counter-based (Philox) generator for the named substream ``path`` of ``seed``.

    Streams with distinct paths are statistically independent, and a stream is
    fully determined by ``(seed, path)``: nothing else is consumed.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_part(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def torch_generator(seed: int, *path: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(stream(seed, *path).integers(0, 2**62)))
    return g


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def grad_check(
    fragment: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
    n_samples: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``fragment`` is re-evaluated with perturbed ``params`` (modified in place)
    and must return a scalar. Run it in float64: central differences in float32
    cannot resolve errors near 1e-4. The default step sits near the cube root
    of float64 machine epsilon, balancing truncation against roundoff.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = fragment()
    if not torch.isfinite(loss).all():
        raise NumericFault("non-finite loss in grad_check")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericFault("non-finite gradient in grad_check")

    rng = stream(seed, "grad_check")
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[pi])
            view = params[pi].view(-1)
            orig = view[idx].item()
            view[idx] = orig + epsilon
            up = fragment().item()
            view[idx] = orig - epsilon
            down = fragment().item()
            view[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericFault("non-finite loss under perturbation")
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[pi].view(-1)[idx].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Iterable[tuple[str, torch.nn.Parameter]],
    state: OptimState,
    lr: float | Mapping[str, float],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> OptimState:
    """One decoupled-weight-decay Adam update, in place.

    ``lr`` is either a scalar or a map from parameter name to its learning rate
    (how layer-wise decay is expressed). Parameters with ``requires_grad`` off
    are not touched at all. Any NaN/Inf gradient aborts before anything moves.
    """
    live = [(n, p) for n, p in params if p.requires_grad]
    for name, p in live:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NumericFault(f"non-finite gradient in {name}")

    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in live:
            rate = lr[name] if isinstance(lr, Mapping) else lr
            if rate < 0:
                raise ValueError("learning rate must be non-negative")
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            if weight_decay:
                p.mul_(1.0 - rate * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-rate / bc1)
    return state


# ---------------------------------------------------------------------------
# Learning-rate plans
# ---------------------------------------------------------------------------


@dataclass
class LrPlan:
    base_lr: float
    warmup_ratio: float
    total_steps: int
    schedule_kind: str = "cosine"
    per_group_scale: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.schedule_kind != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule_kind!r}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_ratio * self.total_steps


def lr_at(plan: LrPlan, step: float, group: str | None = None) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``.

    ``step`` may be fractional; trainers evaluate at update midpoints so that
    neither the first nor the last update gets a zero rate.
    """
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    w = plan.warmup_steps
    if w > 0 and step <= w:
        factor = step / w
    else:
        progress = (step - w) / (plan.total_steps - w)
        factor = 0.5 * (1.0 + math.cos(math.pi * progress))
    scale = plan.per_group_scale.get(group, 1.0) if group is not None else 1.0
    return plan.base_lr * factor * scale


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _pack(tensors: Mapping[str, torch.Tensor]) -> bytes:
    out = [_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().to("cpu", DTYPE).contiguous()
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", t.dim()))
        out.append(struct.pack(f"<{t.dim()}I", *t.shape))
        out.append(t.numpy().astype("<f4", copy=False).tobytes())
    return b"".join(out)


def _unpack(blob: bytes) -> dict[str, torch.Tensor]:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise SchemaError("not a checkpoint payload (bad magic)")
    pos = len(_MAGIC)
    version, count = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).astype(np.float32)
        pos += 4 * size
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
    if pos != len(blob):
        raise SchemaError("trailing bytes in checkpoint payload")
    return tensors


def save_checkpoint(
    directory: str | Path,
    tensors: Mapping[str, torch.Tensor],
    config: Mapping,
    meta: Mapping | None = None,
) -> Path:
    """Write ``weights.bin`` plus a ``manifest.txt`` describing it.

    The byte layout depends only on the tensor values and names, so
    save -> load -> save is byte-stable.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = _pack(tensors)
    (directory / "weights.bin").write_bytes(payload)
    lines = [
        f"format-version = {CHECKPOINT_VERSION}",
        f"config-hash = {config_hash(config)}",
        f"payload-sha256 = {hashlib.sha256(payload).hexdigest()}",
        f"entries = {len(tensors)}",
        f"config = {json.dumps(config, sort_keys=True)}",
    ]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta.{key} = {json.dumps(value, sort_keys=True)}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Return ``(tensors, config, meta)``; verifies payload and config hashes."""
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise SchemaError(f"no manifest in {directory}")
    fields: dict[str, str] = {}
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        fields[key] = value
    if int(fields.get("format-version", -1)) != CHECKPOINT_VERSION:
        raise SchemaError("unsupported manifest format-version")
    payload = (directory / "weights.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != fields.get("payload-sha256"):
        raise SchemaError("checkpoint payload does not match manifest hash")
    config = json.loads(fields["config"])
    if config_hash(config) != fields.get("config-hash"):
        raise SchemaError("config hash mismatch")
    meta = {k[5:]: json.loads(v) for k, v in fields.items() if k.startswith("meta.")}
    return _unpack(payload), config, meta


def tensor_digest(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

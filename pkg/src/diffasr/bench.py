"""Phase timing (encoder / decoder / overhead), RTF, throughput and length-scaling curves."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from .ar import ArModel, greedy_decode
from .errors import DiffAsrError
from .model import DiffusionASR
from .pdd import PddConfig, decode_pdd

_CLOCK_RES = time.get_clock_info("perf_counter").resolution


class MeasurementError(DiffAsrError):
    pass


@dataclass
class TimingRecord:
    engine: str
    utt_id: str
    n_frames: int
    audio_seconds: float
    enc_ms: float
    dec_ms: float
    overhead_ms: float
    total_ms: float
    decoder_calls: int
    emitted_tokens: int
    repeats: int
    raw: list[dict] = field(default_factory=list)
    warning: str = ""


def _run_once(engine: str, model, utt: D.Utterance, spec: D.SynthSpec, pdd_cfg: PddConfig | None, window: int | None):
    t0 = time.perf_counter()
    feats, _ = D.utterance_features(utt, spec)
    t1 = time.perf_counter()
    ctx = model.encode(feats)
    if window is not None:
        ctx = ctx.padded(window)
    t2 = time.perf_counter()
    if engine == "ar":
        res = greedy_decode(model, ctx)
        t3 = time.perf_counter()
        calls, emitted = res.call_count, len(res.tokens)
        text = res.transcript
    else:
        res = decode_pdd(model, ctx, pdd_cfg, utt_key=utt.id, greedy=engine == "single")
        t3 = time.perf_counter()
        calls = res.decoder_calls
        emitted = int((res.batch.canvases[res.selected] != model.cfg.pad_id).sum())
        text = res.transcript
    t4 = time.perf_counter()
    return {
        "enc_ms": 1e3 * (t2 - t1),
        "dec_ms": 1e3 * (t3 - t2),
        "overhead_ms": 1e3 * ((t1 - t0) + (t4 - t3)),
        "total_ms": 1e3 * (t4 - t0),
        "decoder_calls": calls,
        "emitted_tokens": emitted,
        "transcript": text,
    }


def time_decode(
    engine: str,
    model: DiffusionASR | ArModel,
    utts: Sequence[D.Utterance],
    spec: D.SynthSpec,
    repeats: int = 5,
    pdd_cfg: PddConfig | None = None,
    fixed_window: bool = True,
) -> list[TimingRecord]:
    """Serial per-utterance timing averaged over ``repeats`` runs, after one warm-up decode.

    ``engine`` is ``pdd``, ``single`` or ``ar``. Feature synthesis and text
    post-processing are booked as overhead, never as encoder or decoder time.
    With ``fixed_window`` the acoustic context is padded to the encoder's
    ``max_frames``, as with speech encoders that always consume a fixed-length
    input window. Both engines get the same framing.
    """
    if engine not in ("pdd", "single", "ar"):
        raise ValueError(f"unknown engine {engine!r}")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    if engine != "ar" and pdd_cfg is None:
        pdd_cfg = PddConfig(k=1) if engine == "single" else PddConfig()
    if not utts:
        return []
    model.eval()
    window = model.cfg.max_frames if fixed_window else None
    _run_once(engine, model, utts[0], spec, pdd_cfg, window)
    records = []
    for utt in utts:
        runs = [_run_once(engine, model, utt, spec, pdd_cfg, window) for _ in range(repeats)]
        mean = {k: float(np.mean([r[k] for r in runs])) for k in ("enc_ms", "dec_ms", "overhead_ms", "total_ms")}
        calls = {r["decoder_calls"] for r in runs}
        if len(calls) != 1:
            raise MeasurementError("decoder call count changed between repeats")
        span_s = min(r["dec_ms"] for r in runs) / 1e3
        warning = "clock resolution coarser than 1% of decoder span" if _CLOCK_RES > 0.01 * span_s else ""
        records.append(
            TimingRecord(
                engine=engine,
                utt_id=utt.id,
                n_frames=utt.n_frames,
                audio_seconds=utt.audio_seconds,
                decoder_calls=runs[0]["decoder_calls"],
                emitted_tokens=runs[0]["emitted_tokens"],
                repeats=repeats,
                raw=[{k: v for k, v in r.items() if k != "transcript"} for r in runs],
                warning=warning,
                **mean,
            )
        )
    return records


def rtf(record: TimingRecord) -> float:
    if record.audio_seconds <= 0:
        raise ValueError("audio duration must be positive")
    return (record.total_ms / 1e3) / record.audio_seconds


def tokens_per_second(record: TimingRecord) -> float:
    if record.emitted_tokens <= 0:
        raise ValueError("no emitted tokens")
    if record.dec_ms <= 0:
        raise MeasurementError("decoder time is zero")
    return record.emitted_tokens / (record.dec_ms / 1e3)


def ms_per_token(record: TimingRecord) -> float:
    return 1e3 / tokens_per_second(record)


def scaling_curve(
    records: Sequence[TimingRecord], edges: Sequence[float], min_count: int = 10
) -> list[dict]:
    """Per-bucket phase means over nominal audio seconds ``[edges[i], edges[i+1])``."""
    if len(edges) < 4:
        raise ValueError("need at least 3 buckets")
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = [r for r in records if lo <= r.audio_seconds < hi]
        if len(sel) < min_count:
            raise ValueError(f"bucket [{lo}, {hi}) has {len(sel)} utterances, need {min_count}")
        enc = float(np.mean([r.enc_ms for r in sel]))
        dec = float(np.mean([r.dec_ms for r in sel]))
        # utterances that emitted nothing have no per-token rate
        rated = [r for r in sel if r.emitted_tokens > 0]
        rows.append(
            {
                "engine": sel[0].engine,
                "bucket_lo_s": lo,
                "bucket_hi_s": hi,
                "n": len(sel),
                "enc_ms": enc,
                "dec_ms": dec,
                "overhead_ms": float(np.mean([r.overhead_ms for r in sel])),
                "total_ms": float(np.mean([r.total_ms for r in sel])),
                "decoder_share": dec / (enc + dec),
                "decoder_calls": float(np.mean([r.decoder_calls for r in sel])),
                "emitted_tokens": float(np.mean([r.emitted_tokens for r in sel])),
                "rtf": float(np.mean([rtf(r) for r in sel])),
                "n_rated": len(rated),
                "ms_per_token": float(np.mean([ms_per_token(r) for r in rated])) if rated else float("nan"),
                "tokens_per_s": float(np.mean([tokens_per_second(r) for r in rated])) if rated else float("nan"),
            }
        )
    return rows


_RECORD_FIELDS = [
    "engine", "utt_id", "n_frames", "audio_seconds", "enc_ms", "dec_ms", "overhead_ms", "total_ms",
    "decoder_calls", "emitted_tokens", "repeats", "rtf", "tokens_per_s", "raw_total_ms", "warning",
]


def write_records_csv(path: str | Path, records: Sequence[TimingRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=_RECORD_FIELDS)
        w.writeheader()
        for r in records:
            row = {k: v for k, v in asdict(r).items() if k in _RECORD_FIELDS}
            row["rtf"] = rtf(r)
            row["tokens_per_s"] = tokens_per_second(r) if r.emitted_tokens > 0 else ""
            row["raw_total_ms"] = ";".join(f"{x['total_ms']:.3f}" for x in r.raw)
            w.writerow(row)


def write_rows_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def summary_table(curves: dict[str, list[dict]]) -> str:
    """Markdown table: one row per (bucket, engine) with the usual latency columns."""
    head = "| bucket (s) | engine | enc ms | dec ms | ovhd ms | total ms | RTF | calls | ms/token | tokens/s |"
    lines = [head, "|---" * (head.count("|") - 1) + "|"]
    buckets = sorted({(r["bucket_lo_s"], r["bucket_hi_s"]) for rows in curves.values() for r in rows})
    for lo, hi in buckets:
        for engine, rows in curves.items():
            for r in rows:
                if (r["bucket_lo_s"], r["bucket_hi_s"]) == (lo, hi):
                    lines.append(
                        f"| {lo:g}-{hi:g} | {engine} | {r['enc_ms']:.1f} | {r['dec_ms']:.1f} | {r['overhead_ms']:.1f} | "
                        f"{r['total_ms']:.1f} | {r['rtf']:.3f} | {r['decoder_calls']:.1f} | {r['ms_per_token']:.2f} | {r['tokens_per_s']:.1f} |"
                    )
    return "\n".join(lines) + "\n"

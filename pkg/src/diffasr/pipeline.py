"""On-disk pipeline: corpus -> stage checkpoints -> decode reports -> benchmarks.

Layout under an output directory::

    data/corpus.jsonl, data/stats.json
    ckpt/<stage>/{weights.bin, manifest.txt, train_log.jsonl}   stage in 0e, 0d, 1, 2, ar
    decode/<name>/{records.jsonl, report.json, summary.md}
    bench/{pdd,ar}_records.csv, bench/{pdd,ar}_curve.csv, bench/summary.md
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import bench as B
from . import curriculum as C
from . import data as D
from . import eval as metrics
from .ar import ArModel, greedy_decode
from .config import RunConfig
from .errors import DependencyError
from .model import DiffusionASR, ModelConfig
from .numerics import load_checkpoint, save_checkpoint, stream
from .pdd import NAMED_SCHEDULES, STEP_SCHEDULES, PddConfig, decode_pdd, decode_single, utterance_record

log = logging.getLogger(__name__)

STAGE_DEPS = {"0e": [], "0d": [], "1": ["0e", "0d"], "2": ["1"], "ar": ["0e"]}


def corpus_path(out: Path) -> Path:
    return Path(out) / "data" / "corpus.jsonl"


def ckpt_dir(out: Path, stage: str) -> Path:
    return Path(out) / "ckpt" / stage


def _require(out: Path, stage: str) -> None:
    if not corpus_path(out).exists():
        raise DependencyError("no corpus; run gen-data first")
    for dep in STAGE_DEPS[stage]:
        if not (ckpt_dir(out, dep) / "manifest.txt").exists():
            raise DependencyError(f"stage {stage} needs the stage {dep} checkpoint")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def source_text(cfg: RunConfig) -> str:
    return D.make_source_text(cfg.seed, cfg["data"]["source_words"])


def gen_data(cfg: RunConfig, out: Path) -> dict:
    d = cfg["data"]
    spec = cfg.synth_spec()
    utts = D.gen_corpus(
        source_text(cfg),
        d["n_utts"],
        (d["len_min"], d["len_max"]),
        stream(cfg.seed, "corpus"),
        spec,
        long_frac=d["long_frac"],
        long_min=d["long_min"],
    )
    path = corpus_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    D.write_corpus(path, utts, spec)
    stats = D.corpus_stats(utts, d["duration_edges"])
    (path.parent / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return stats


def load_corpus(cfg: RunConfig, out: Path) -> dict[str, list[D.Utterance]]:
    if not corpus_path(out).exists():
        raise DependencyError("no corpus; run gen-data first")
    utts = D.read_corpus(corpus_path(out), cfg.synth_spec())
    return {s: [u for u in utts if u.split == s] for s in D.SPLITS}


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------


def _save(out: Path, stage: str, tensors: dict, cfg: RunConfig, result: C.TrainResult, extra: dict | None = None):
    directory = ckpt_dir(out, stage)
    meta = {"stage": stage, "best_epoch": result.best_epoch, "epochs_run": len(result.log) - 1}
    if stage in ("0e", "0d"):
        meta["surrogate"] = "stage-0 stand-in for a pre-trained component"
    meta.update(extra or {})
    save_checkpoint(directory, tensors, cfg.model_config().to_dict(), meta)
    with open(directory / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec) + "\n")
    return directory


def load_tensors(out: Path, stage: str) -> tuple[dict, ModelConfig, dict]:
    directory = ckpt_dir(out, stage)
    if not (directory / "manifest.txt").exists():
        raise DependencyError(f"no stage {stage} checkpoint in {directory.parent}")
    tensors, config, meta = load_checkpoint(directory)
    return tensors, ModelConfig.from_dict(config), meta


def load_diffusion(out: Path, stage: str = "2") -> DiffusionASR:
    tensors, mcfg, _ = load_tensors(out, stage)
    model = DiffusionASR(mcfg)
    model.load_state_dict(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def load_ar(out: Path) -> ArModel:
    tensors, mcfg, _ = load_tensors(out, "ar")
    model = ArModel(mcfg)
    model.load_state_dict(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _paired(encoder, utts, cfg: RunConfig):
    return C.paired_set(encoder, utts, cfg.synth_spec(), cfg.model_config().max_canvas_len)


def _encoder_from(out: Path) -> tuple[dict, "torch.nn.Module"]:
    tensors, mcfg, _ = load_tensors(out, "0e")
    model = DiffusionASR(mcfg)
    state = model.state_dict()
    state.update(tensors)
    model.load_state_dict(state)
    for p in model.encoder.parameters():
        p.requires_grad_(False)
    return tensors, model.encoder


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_stage(stage: str, cfg: RunConfig, out: Path) -> Path:
    """Run one curriculum stage from the artifacts already under ``out``."""
    if stage not in STAGE_DEPS:
        raise ValueError(f"unknown stage {stage!r}")
    _require(out, stage)
    out = Path(out)
    split = load_corpus(cfg, out)
    spec = cfg.synth_spec()
    mcfg = cfg.model_config()
    scfg = cfg.stage_config(stage)
    log_path = ckpt_dir(out, stage) / "train_log.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)

    if stage == "0e":
        encoder, result = C.pretrain_encoder(split["train"], split["dev"], spec, mcfg, scfg, log_path=log_path)
        probe = C.probe_accuracy(encoder, split["train"][:400], split["dev"], spec)
        tensors = {f"encoder.{k}": v for k, v in encoder.state_dict().items()}
        return _save(out, stage, tensors, cfg, result, {"probe_accuracy": probe})

    if stage == "0d":
        n_extra = cfg["data"]["n_text_utts"]
        rng = stream(cfg.seed, "text-spans")
        extra = D.text_spans(source_text(cfg), n_extra, (cfg["data"]["len_min"], cfg["data"]["len_max"]), rng)
        texts = [u.transcript for u in split["train"]] + extra
        dev = [u.transcript for u in split["dev"]]
        model, result = C.pretrain_decoder_text(texts, dev, mcfg, scfg, log_path=log_path)
        fill = C.fill_accuracy(model, dev)
        tensors = {k: v for k, v in model.state_dict().items() if k.startswith("decoder.") and ".cross_attn." not in k}
        return _save(out, stage, tensors, cfg, result, {"fill_accuracy_10pct": fill})

    enc_tensors, encoder = _encoder_from(out)
    train = _paired(encoder, split["train"], cfg)
    dev = _paired(encoder, split["dev"], cfg)

    if stage == "ar":
        model, result = C.train_ar(enc_tensors, train, dev, mcfg, scfg, log_path=log_path)
        return _save(out, stage, dict(model.state_dict()), cfg, result, {"val_token_acc": result.log[result.best_epoch]["val_token_acc"]})

    if stage == "1":
        dec_tensors, _, _ = load_tensors(out, "0d")
        model = C.assemble(enc_tensors, dec_tensors, mcfg)
        result = C.train_stage1(model, train, dev, scfg, encoder, spec, log_path)
    else:
        model = load_diffusion(out, "1")
        result = C.train_stage2(model, train, dev, scfg, encoder, spec, log_path)
    on, off = C.conditioned_vs_ablated_loss(model, dev)
    extra = {"val_loss_conditioned": on, "val_loss_ablated": off}
    if stage == "2":
        extra["max_sampled_t"] = max(result.sampled_t)
        extra["min_sampled_t"] = min(result.sampled_t)
    return _save(out, stage, dict(model.state_dict()), cfg, result, extra)


def run_pipeline(cfg: RunConfig, out: Path, stages: Iterable[str] = ("0e", "0d", "1", "2", "ar")) -> dict:
    """gen-data followed by the listed stages; returns wall-clock seconds per step."""
    out = Path(out)
    timings = {}
    t0 = time.perf_counter()
    gen_data(cfg, out)
    timings["gen-data"] = time.perf_counter() - t0
    for stage in stages:
        t = time.perf_counter()
        train_stage(stage, cfg, out)
        timings[stage] = time.perf_counter() - t
        log.info("stage %s done in %.1fs", stage, timings[stage])
    timings["total"] = time.perf_counter() - t0
    cfg.write(out)
    (out / "pipeline_timing.json").write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
    return timings


# ---------------------------------------------------------------------------
# Decoding and reports
# ---------------------------------------------------------------------------


def contexts_for(model, utts: Sequence[D.Utterance], spec: D.SynthSpec):
    with torch.no_grad():
        return [model.encode(D.utterance_features(u, spec)[0]) for u in utts]


def decode_rows(
    engine: str,
    model,
    utts: Sequence[D.Utterance],
    spec: D.SynthSpec,
    pdd_cfg: PddConfig | None = None,
    conditioning: bool = True,
    contexts=None,
) -> list[dict]:
    """Per-utterance decode records for ``engine`` in ``pdd``, ``single`` or ``ar``."""
    contexts = contexts if contexts is not None else contexts_for(model, utts, spec)
    rows = []
    for utt, ctx in zip(utts, contexts):
        if engine == "ar":
            res = greedy_decode(model, ctx)
            w = metrics.wer(res.transcript, utt.transcript)
            rows.append(
                {
                    "id": utt.id, "reference": utt.transcript, "transcript": res.transcript, "wer": w,
                    "cer": metrics.cer(res.transcript, utt.transcript), "call_count": res.call_count,
                    "decoder_calls": res.call_count, "ref_len": len(utt.transcript), "hyp_len": len(res.transcript),
                }
            )
            continue
        if engine == "single":
            res = decode_single(model, ctx, pdd_cfg.schedule, pdd_cfg.rng_seed, utt.id, conditioning, utt.transcript)
        else:
            res = decode_pdd(model, ctx, pdd_cfg, utt.transcript, utt.id, conditioning)
        rows.append(utterance_record(utt.id, utt.transcript, res))
    return rows


def summarize(rows: Sequence[dict]) -> dict:
    """Corpus aggregates recomputable from the rows."""
    pairs = [(r["transcript"], r["reference"]) for r in rows]
    wer = metrics.corpus_error_rate(pairs, "word")
    cer = metrics.corpus_error_rate(pairs, "char")
    report = {
        "n": len(rows),
        "wer_pooled": wer["pooled"],
        "wer_mean": wer["mean"],
        "cer_pooled": cer["pooled"],
        "cer_mean": cer["mean"],
        "decoder_calls_mean": float(np.mean([r["decoder_calls"] for r in rows])),
    }
    if rows and "candidate_wers" in rows[0]:
        # per-utterance WER times reference word count recovers the oracle candidate's edit count
        oracle = np.array([r["oracle_wer"] for r in rows])
        n_words = np.array([len(metrics.normalize(r["reference"]).split()) for r in rows])
        report["oracle_wer_pooled"] = float((oracle * n_words).sum() / n_words.sum())
        report["oracle_wer_mean"] = float(oracle.mean())
        report["selection"] = metrics.selection_stats(rows)
        try:
            report["confidence_spearman"] = metrics.confidence_correlation(rows)
        except (metrics.UndefinedMetric, ValueError):
            report["confidence_spearman"] = None
        n_steps = len(rows[0]["trace"])
        report["step_trace"] = [
            {
                "step": s + 1,
                "mask_fraction": rows[0]["trace"][s]["mask_fraction"],
                "mean_confidence": float(np.mean([r["trace"][s]["mean_confidence"] for r in rows])),
                "tokens_changed": float(np.mean([r["trace"][s]["tokens_changed"] for r in rows])),
                "mean_candidate_wer": float(np.mean([np.mean(r["trace"][s]["candidate_wers"]) for r in rows])),
            }
            for s in range(n_steps)
        ]
    try:
        report["length"] = metrics.length_stats(rows)
    except (metrics.UndefinedMetric, ValueError):
        report["length"] = None
    return report


def summary_markdown(name: str, report: dict) -> str:
    lines = [f"# {name}", "", "| metric | value |", "|---|---|"]
    for key in ("n", "wer_pooled", "wer_mean", "cer_pooled", "oracle_wer_pooled", "confidence_spearman", "decoder_calls_mean"):
        if report.get(key) is not None:
            v = report[key]
            lines.append(f"| {key} | {v:.4f} |" if isinstance(v, float) else f"| {key} | {v} |")
    if "selection" in report:
        for k, v in report["selection"].items():
            lines.append(f"| selection.{k} | {v:.4f} |" if isinstance(v, float) else f"| selection.{k} | {v} |")
    if "step_trace" in report:
        lines += ["", "| step | mask | WER (mean cand.) | avg confidence | tokens changed |", "|---|---|---|---|---|"]
        for s in report["step_trace"]:
            lines.append(
                f"| {s['step']} | {s['mask_fraction']:.2f} | {s['mean_candidate_wer']:.3f} | {s['mean_confidence']:.3f} | {s['tokens_changed']:.3f} |"
            )
    return "\n".join(lines) + "\n"


def eval_utterances(cfg: RunConfig, out: Path, split: str | None = None) -> list[D.Utterance]:
    split = split or cfg["eval"]["split"]
    utts = load_corpus(cfg, out)[split]
    limit = cfg["eval"]["max_utts"]
    return utts[:limit] if limit else utts


def decode(cfg: RunConfig, out: Path, engine: str = "pdd", split: str | None = None, ablate: bool = False, name: str | None = None) -> dict:
    out = Path(out)
    utts = eval_utterances(cfg, out, split)
    spec = cfg.synth_spec()
    model = load_ar(out) if engine == "ar" else load_diffusion(out, "2")
    rows = decode_rows(engine, model, utts, spec, cfg.pdd_config(), conditioning=not ablate)
    report = summarize(rows)
    report.update({"engine": engine, "split": split or cfg["eval"]["split"], "ablated_conditioning": ablate})
    if engine != "ar":
        report["pdd"] = {**asdict(cfg.pdd_config()), "schedule": list(cfg.pdd_config().schedule)}
    name = name or f"{engine}{'-ablated' if ablate else ''}-{report['split']}"
    directory = out / "decode" / name
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "records.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    (directory / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    (directory / "summary.md").write_text(summary_markdown(name, report), encoding="utf-8")
    cfg.write(directory)
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_configs(study: str, base: PddConfig) -> list[tuple[str, PddConfig]]:
    if study == "k":
        return [(f"k={k}", PddConfig(k, base.schedule, base.temperature, base.rng_seed)) for k in (5, 10, 15)]
    if study == "steps":
        return [(f"N={n} {list(s)}", PddConfig(5, s, base.temperature, base.rng_seed)) for n, s in STEP_SCHEDULES.items()]
    if study == "schedule":
        return [(f"{name} {list(s)}", PddConfig(5, s, base.temperature, base.rng_seed)) for name, s in NAMED_SCHEDULES.items()]
    raise ValueError(f"unknown study {study!r}")


def sweep(
    model: DiffusionASR,
    utts: Sequence[D.Utterance],
    spec: D.SynthSpec,
    configs: Sequence[tuple[str, PddConfig]],
    seeds: Sequence[int],
) -> list[dict]:
    """Seed-averaged pooled WER and oracle WER for each PDD configuration."""
    contexts = contexts_for(model, utts, spec)
    rows = []
    for label, pcfg in configs:
        per_seed = []
        for seed in seeds:
            run = PddConfig(pcfg.k, pcfg.schedule, pcfg.temperature, seed)
            per_seed.append(summarize(decode_rows("pdd", model, utts, spec, run, contexts=contexts)))
        rows.append(
            {
                "config": label,
                "k": pcfg.k,
                "steps": pcfg.n_steps,
                "schedule": list(pcfg.schedule),
                "wer": float(np.mean([r["wer_pooled"] for r in per_seed])),
                "oracle_wer": float(np.mean([r["oracle_wer_pooled"] for r in per_seed])),
                "cer": float(np.mean([r["cer_pooled"] for r in per_seed])),
                "per_seed_wer": [r["wer_pooled"] for r in per_seed],
                "per_seed_oracle_wer": [r["oracle_wer_pooled"] for r in per_seed],
                "seeds": list(seeds),
            }
        )
    return rows


def ablate(cfg: RunConfig, out: Path, study: str) -> list[dict]:
    out = Path(out)
    model = load_diffusion(out, "2")
    rows = sweep(model, eval_utterances(cfg, out), cfg.synth_spec(), sweep_configs(study, cfg.pdd_config()), cfg["eval"]["seeds"])
    directory = out / "ablate"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{study}.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    lines = [f"# PDD sweep: {study}", "", "| config | WER | oracle WER |", "|---|---|---|"]
    lines += [f"| {r['config']} | {100 * r['wer']:.2f} | {100 * r['oracle_wer']:.2f} |" for r in rows]
    (directory / f"{study}.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg.write(directory, f"effective_config_{study}.ini")
    return rows


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def bench_utterances(cfg: RunConfig, out: Path) -> list[D.Utterance]:
    """Up to ``per_bucket`` test utterances from each duration bucket."""
    edges = cfg["bench"]["bucket_edges"]
    per = cfg["bench"]["per_bucket"]
    pool = load_corpus(cfg, out)["test"] + load_corpus(cfg, out)["dev"]
    chosen = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        chosen += [u for u in pool if lo <= u.audio_seconds < hi][:per]
    return chosen


def run_bench(cfg: RunConfig, out: Path, engines: Sequence[str] = ("pdd", "ar")) -> dict:
    out = Path(out)
    utts = bench_utterances(cfg, out)
    spec = cfg.synth_spec()
    edges = cfg["bench"]["bucket_edges"]
    directory = out / "bench"
    directory.mkdir(parents=True, exist_ok=True)
    curves = {}
    records = {}
    for engine in engines:
        model = load_ar(out) if engine == "ar" else load_diffusion(out, "2")
        recs = B.time_decode(
            engine, model, utts, spec, cfg["bench"]["repeats"], cfg.pdd_config(), cfg["bench"]["fixed_window"]
        )
        records[engine] = recs
        curves[engine] = B.scaling_curve(recs, edges, min_count=min(10, cfg["bench"]["per_bucket"]))
        B.write_records_csv(directory / f"{engine}_records.csv", recs)
        B.write_rows_csv(directory / f"{engine}_curve.csv", curves[engine])
    (directory / "summary.md").write_text(B.summary_table(curves), encoding="utf-8")
    (directory / "curves.json").write_text(json.dumps(curves, indent=2) + "\n", encoding="utf-8")
    cfg.write(directory)
    return {"curves": curves, "records": records}


def make_report(out: Path) -> Path:
    """Concatenate decode, sweep and bench summaries into ``report.md``."""
    out = Path(out)
    parts = ["# Run report", ""]
    timing = out / "pipeline_timing.json"
    if timing.exists():
        parts += ["## Pipeline timing (s)", "", "```", timing.read_text().strip(), "```", ""]
    for stage in ("0e", "0d", "1", "2", "ar"):
        manifest = ckpt_dir(out, stage) / "manifest.txt"
        if manifest.exists():
            metas = [l for l in manifest.read_text().splitlines() if l.startswith("meta.")]
            parts += [f"## Stage {stage}", "", *[f"- {m}" for m in metas], ""]
    for md in sorted((out / "decode").glob("*/summary.md")) if (out / "decode").exists() else []:
        parts += [md.read_text(), ""]
    for md in sorted((out / "ablate").glob("*.md")) if (out / "ablate").exists() else []:
        parts += [md.read_text(), ""]
    bench_md = out / "bench" / "summary.md"
    if bench_md.exists():
        parts += ["# Latency", "", bench_md.read_text()]
    path = out / "report.md"
    path.write_text("\n".join(parts), encoding="utf-8")
    return path

"""Synthetic paired corpus: text spans rendered into noisy frame features.

Features are never stored; every utterance carries a ``feature_seed`` and the
frames are regenerated from ``(feature_seed, SynthSpec)`` on demand.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, SchemaError
from .numerics import stream

PAD_ID = 0
MASK_ID = 1
EOS_ID = 2
CHARS = " 'abcdefghijklmnopqrstuvwxyz.,?-"
CHAR_OFFSET = 3
VOCAB_SIZE = CHAR_OFFSET + len(CHARS)
_CHAR_TO_ID = {c: i + CHAR_OFFSET for i, c in enumerate(CHARS)}

FRAME_SECONDS = 0.010
SPLITS = ("train", "dev", "test")

# Closed word list; a small vocabulary gives the text-only prior something to learn.
WORDS = """
the of and to a in is that it was for on are as with his they at be this from
have or by one had not but what all were when we there can an your which their
said if do will each about how up out them then she many some so these would other
into has more her two like him see time could no make than first been its who now
people my made over did down only way find use may water long little very after
words called just where most know get through back much go good new write our me
man too any day same right look think also around another came come work three
must because does part even place well such here take why help put different away
again off went old number great tell men say small every found still between name
should home big give air line set own under read last never us left end along while
might next sound below saw something thought both few those always show large often
together asked house world going want school important until form food keep children
feet land side without boy once animal life enough took four head above kind began
almost live page got earth need far hand high year mother light country father let
night picture being study second soon story since white ever paper hard near sentence
better best across during today however sure knew it's try told young sun thing whole
hear example heard several change answer room sea against top turned learn point city
play toward five himself usually money seen didn't car morning i'm body upon family later
""".split()


@dataclass(frozen=True)
class SynthSpec:
    f_min: int = 2
    f_max: int = 3
    d_feat: int = 24
    noise_sigma: float = 0.4
    codebook_seed: int = 1234
    max_frames: int = 192

    def __post_init__(self):
        if self.f_min < 1 or self.f_max < self.f_min:
            raise ValueError("need 1 <= f_min <= f_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass(frozen=True)
class Utterance:
    id: str
    transcript: str
    n_frames: int
    feature_seed: int
    split: str

    @property
    def audio_seconds(self) -> float:
        return self.n_frames * FRAME_SECONDS


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def tokenize(text: str, max_len: int = 64) -> np.ndarray:
    """Chars + eos + pad fill to ``max_len``."""
    if len(text) > max_len - 1:
        raise CapacityError(f"text of {len(text)} chars does not fit a {max_len}-token canvas")
    try:
        ids = [_CHAR_TO_ID[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None
    canvas = np.full(max_len, PAD_ID, dtype=np.int64)
    canvas[: len(ids)] = ids
    canvas[len(ids)] = EOS_ID
    return canvas


def detokenize(canvas: Sequence[int]) -> str:
    """Inverse of :func:`tokenize` on valid canvases; raises on anything else."""
    canvas = list(map(int, canvas))
    if EOS_ID not in canvas:
        raise SchemaError("canvas has no eos")
    end = canvas.index(EOS_ID)
    if any(t != PAD_ID for t in canvas[end + 1 :]):
        raise SchemaError("non-pad token after eos")
    body = canvas[:end]
    if any(t < CHAR_OFFSET for t in body):
        raise SchemaError("special token inside transcript span")
    return "".join(CHARS[t - CHAR_OFFSET] for t in body)


def canvas_to_text(canvas: Sequence[int]) -> str:
    """Lenient reading of a model-produced canvas: cut at first eos, drop specials."""
    out = []
    for t in map(int, canvas):
        if t == EOS_ID:
            break
        if t >= CHAR_OFFSET:
            out.append(CHARS[t - CHAR_OFFSET])
    return " ".join("".join(out).split())


# ---------------------------------------------------------------------------
# Text corpus
# ---------------------------------------------------------------------------


def make_source_text(seed: int, n_words: int = 60000) -> str:
    """Zipf-weighted word stream over :data:`WORDS`."""
    rng = stream(seed, "source_text")
    ranks = np.arange(1, len(WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks**0.9
    probs /= probs.sum()
    idx = rng.choice(len(WORDS), size=n_words, p=probs)
    return " ".join(WORDS[i] for i in idx)


def _sample_span(words: Sequence[str], lo: int, hi: int, rng: np.random.Generator) -> str | None:
    target = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, len(words)))
    out: list[str] = []
    length = 0
    for w in words[start:]:
        extra = len(w) + (1 if out else 0)
        if length + extra > target:
            break
        out.append(w)
        length += extra
    if length < lo:
        return None
    return " ".join(out)


def _regions(words: list[str], fracs: Sequence[float]) -> dict[str, list[str]]:
    n = len(words)
    a = int(n * fracs[0])
    b = a + int(n * fracs[1])
    return {"train": words[:a], "dev": words[a:b], "test": words[b:]}


def text_spans(
    source_text: str,
    n: int,
    len_range: tuple[int, int],
    rng: np.random.Generator,
    split: str = "train",
    split_fracs: Sequence[float] = (0.8, 0.1, 0.1),
) -> list[str]:
    """Word spans drawn from one split's region of the source text."""
    region = _regions(source_text.split(), split_fracs)[split]
    out: list[str] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise ValueError("source text too short for requested span lengths")
        span = _sample_span(region, *len_range, rng)
        if span is not None:
            out.append(span)
    return out


def gen_corpus(
    source_text: str,
    n_utts: int,
    len_range: tuple[int, int],
    rng: np.random.Generator,
    spec: SynthSpec = SynthSpec(),
    split_fracs: Sequence[float] = (0.8, 0.1, 0.1),
    long_frac: float = 0.1,
    long_min: int = 50,
) -> list[Utterance]:
    """Sample utterances as contiguous word spans, one source region per split.

    Lengths are uniform on ``[lo, long_min)`` except for a ``long_frac`` tail
    drawn from ``[long_min, hi]``. Dev/test transcripts that occur verbatim
    inside a train transcript are rejected.
    """
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError("bad len_range")
    words = source_text.split()
    if sum(len(w) + 1 for w in words) < 20 * hi:
        raise ValueError("source text too short")
    regions = _regions(words, split_fracs)
    counts = [int(round(n_utts * f)) for f in split_fracs]
    counts[0] = n_utts - counts[1] - counts[2]
    long_min = min(max(long_min, lo), hi)

    utts: list[Utterance] = []
    train_blob = ""
    for split, count in zip(SPLITS, counts):
        region = regions[split]
        if sum(len(w) + 1 for w in region) < 2 * hi:
            raise ValueError(f"source region for {split!r} too short")
        made = 0
        attempts = 0
        while made < count:
            attempts += 1
            if attempts > 200 * count + 1000:
                raise ValueError(f"could not draw {count} {split} utterances from source text")
            if rng.random() < long_frac:
                span = _sample_span(region, long_min, hi, rng)
            else:
                span = _sample_span(region, lo, max(lo, long_min - 1), rng)
            if span is None:
                continue
            if split != "train" and span in train_blob:
                continue
            seed = int(rng.integers(0, 2**31 - 1))
            n_frames = len(_durations(span, spec, stream(seed, "features")))
            utts.append(Utterance(f"{split}-{made:05d}", span, n_frames, seed, split))
            made += 1
        if split == "train":
            train_blob = "\n".join(u.transcript for u in utts)
    return utts


# ---------------------------------------------------------------------------
# Feature synthesis
# ---------------------------------------------------------------------------


def codebook(spec: SynthSpec) -> np.ndarray:
    rng = stream(spec.codebook_seed, "codebook")
    return rng.standard_normal((len(CHARS), spec.d_feat)).astype(np.float32)


def _durations(transcript: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    counts = rng.integers(spec.f_min, spec.f_max + 1, size=len(transcript))
    return np.repeat(np.arange(len(transcript)), counts)


def synth_features(
    transcript: str, spec: SynthSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Frames ``[n_frames, d_feat]`` and per-frame token ids.

    The rng is consumed durations-first, so the frame count only depends on
    the first draws of the stream.
    """
    ids = np.array([_CHAR_TO_ID[c] for c in transcript], dtype=np.int64)
    which = _durations(transcript, spec, rng)
    if len(which) > spec.max_frames:
        raise CapacityError(f"{len(which)} frames exceed budget of {spec.max_frames}")
    labels = ids[which]
    frames = codebook(spec)[labels - CHAR_OFFSET]
    if spec.noise_sigma > 0:
        frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape).astype(np.float32)
    return frames.astype(np.float32), labels


def utterance_features(
    utt: Utterance, spec: SynthSpec, variant: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Canonical features for ``utt``; ``variant`` selects a re-synthesised copy."""
    return synth_features(utt.transcript, spec, _feature_rng(utt, variant))


def frame_char_index(utt: Utterance, spec: SynthSpec, variant: int | None = None) -> np.ndarray:
    """Index of the transcript character each frame of ``utterance_features`` renders."""
    return _durations(utt.transcript, spec, _feature_rng(utt, variant))


def _feature_rng(utt: Utterance, variant: int | None) -> np.random.Generator:
    if variant is None:
        return stream(utt.feature_seed, "features")
    return stream(utt.feature_seed, "augment", variant)


# ---------------------------------------------------------------------------
# Statistics and on-disk format
# ---------------------------------------------------------------------------


def corpus_stats(utts: Sequence[Utterance], duration_edges: Sequence[float] = (0.0, 0.5, 1.0, 1.5, 2.0)) -> dict:
    """Duration histogram and token-length percentiles (tokens = chars + eos)."""
    secs = np.array([u.audio_seconds for u in utts])
    toks = np.array([len(u.transcript) + 1 for u in utts])
    hist = []
    edges = list(duration_edges)
    for a, b in zip(edges[:-1], edges[1:]):
        n = int(((secs >= a) & (secs < b)).sum())
        hist.append({"range_s": [a, b], "count": n, "percent": round(100.0 * n / max(len(utts), 1), 2)})
    beyond = int((secs >= edges[-1]).sum())
    if beyond:
        hist.append({"range_s": [edges[-1], None], "count": beyond, "percent": round(100.0 * beyond / len(utts), 2)})
    return {
        "n_utterances": len(utts),
        "per_split": {s: sum(u.split == s for u in utts) for s in SPLITS},
        "duration_histogram": hist,
        "token_length": {
            "p50": float(np.percentile(toks, 50)),
            "p90": float(np.percentile(toks, 90)),
            "p99": float(np.percentile(toks, 99)),
            "max": int(toks.max()),
        },
        "frames": {"mean": float(secs.mean() / FRAME_SECONDS), "max": int(round(secs.max() / FRAME_SECONDS))},
    }


def write_corpus(path: str | Path, utts: Iterable[Utterance], spec: SynthSpec) -> None:
    digest = spec.digest()
    lines = []
    for u in utts:
        rec = asdict(u)
        rec["spec_hash"] = digest
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path, spec: SynthSpec | None = None) -> list[Utterance]:
    utts = []
    digest = spec.digest() if spec is not None else None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if digest is not None and rec.get("spec_hash") != digest:
            raise SchemaError(f"line {lineno}: corpus was generated with a different synth spec")
        try:
            utts.append(
                Utterance(rec["id"], rec["transcript"], int(rec["n_frames"]), int(rec["feature_seed"]), rec["split"])
            )
        except KeyError as exc:
            raise SchemaError(f"line {lineno}: missing field {exc.args[0]}") from None
    return utts

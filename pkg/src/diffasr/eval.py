"""Text normalization, WER/CER, candidate-selection statistics and correlation analyses."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetric

if os.environ.get("DIFFASR_PURE_PYTHON"):
    from ._align_py import align as _align

    BACKEND = "python"
else:
    try:
        from ._align import align as _align

        BACKEND = "compiled"
    except ImportError:
        from ._align_py import align as _align

        BACKEND = "python"


_STRIP = re.compile(r"[^a-z0-9' ]+")


def normalize(text: str) -> str:
    """Lowercase, drop everything but letters, digits, apostrophes and spaces, squeeze blanks."""
    text = _STRIP.sub(" ", text.lower().replace("\t", " ").replace("\n", " "))
    return " ".join(text.split())


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    deletions: int
    insertions: int


def _ids(a: Sequence, b: Sequence) -> tuple[list[int], list[int]]:
    table: dict = {}
    return [table.setdefault(x, len(table)) for x in a], [table.setdefault(x, len(table)) for x in b]


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein distance turning ``ref`` into ``hyp``; deletions are ref tokens missing from hyp."""
    a, b = _ids(ref, hyp)
    return EditCounts(*_align(a, b))


def _units(text: str, unit: str) -> list:
    text = normalize(text)
    return text.split() if unit == "word" else list(text)


def error_counts(hyp: str, ref: str, unit: str = "word") -> tuple[int, int]:
    """``(edit distance, reference length)`` after normalization."""
    r = _units(ref, unit)
    if not r:
        raise UndefinedMetric("reference is empty after normalization")
    return edit_distance(r, _units(hyp, unit)).distance, len(r)


def wer(hyp: str, ref: str) -> float:
    d, n = error_counts(hyp, ref, "word")
    return d / n


def cer(hyp: str, ref: str) -> float:
    d, n = error_counts(hyp, ref, "char")
    return d / n


def corpus_error_rate(pairs: Sequence[tuple[str, str]], unit: str = "word") -> dict:
    """Pooled rate (total edits / total reference units) plus the per-utterance mean."""
    if not pairs:
        raise ValueError("no pairs")
    dist = total = 0
    rates = []
    for hyp, ref in pairs:
        d, n = error_counts(hyp, ref, unit)
        dist += d
        total += n
        rates.append(d / n)
    return {"pooled": dist / total, "mean": float(np.mean(rates))}


# ---------------------------------------------------------------------------
# Report-level statistics
# ---------------------------------------------------------------------------


def selection_stats(rows: Sequence[Mapping], gap_threshold: float = 0.02) -> dict:
    """Selection accuracy, mean selection gap and near-optimal rate.

    Each row needs ``selected_wer`` and ``oracle_wer``. A selection counts as
    correct when its WER equals the oracle WER (so ties with the argmin count).
    """
    if not rows:
        raise ValueError("selection_stats needs at least one row")
    sel = np.array([float(r["selected_wer"]) for r in rows])
    orc = np.array([float(r["oracle_wer"]) for r in rows])
    gap = sel - orc
    return {
        "selection_accuracy": float(np.mean(np.isclose(gap, 0.0, atol=1e-12))),
        "mean_gap": float(gap.mean()),
        "within_gap_rate": float(np.mean(gap <= gap_threshold + 1e-12)),
        "n": len(rows),
    }


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 3:
        raise ValueError("need at least 3 rows")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetric("correlation undefined for a constant column")
    xc, yc = x - x.mean(), y - y.mean()
    return float((xc @ yc) / np.sqrt((xc @ xc) * (yc @ yc)))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 3:
        raise ValueError("need at least 3 rows")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedMetric("correlation undefined for a constant column")
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def confidence_correlation(rows: Sequence[Mapping]) -> float:
    """Spearman rank correlation between ``confidence`` and ``wer`` columns."""
    return spearman([r["confidence"] for r in rows], [r["wer"] for r in rows])


def length_stats(rows: Sequence[Mapping], bin_edges: Sequence[int] = (0, 1, 3, 6, 11)) -> dict:
    """Reference-vs-hypothesis character length agreement.

    Rows need ``ref_len``, ``hyp_len`` and ``wer``. The binned table groups
    rows by |delta len| (last bin open-ended) in ascending order.
    """
    ref = np.array([float(r["ref_len"]) for r in rows])
    hyp = np.array([float(r["hyp_len"]) for r in rows])
    if len(ref) < 3:
        raise ValueError("need at least 3 rows")
    delta = np.abs(ref - hyp)
    if np.array_equal(ref, hyp) and np.ptp(ref) > 0:
        r = 1.0
    else:
        r = _pearson(ref, hyp)
    wers = np.array([float(row["wer"]) for row in rows])
    table = []
    edges = list(bin_edges) + [np.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (delta >= lo) & (delta < hi)
        if sel.any():
            table.append(
                {"delta_lo": lo, "delta_hi": None if np.isinf(hi) else hi, "n": int(sel.sum()), "mean_wer": float(wers[sel].mean())}
            )
    return {"pearson_r": r, "mean_abs_delta": float(delta.mean()), "binned": table}

"""Shared fixtures: one trained pipeline, built once and cached on disk.

The cache key covers the run config and every module that influences
training, so editing decoding or reporting code reuses the checkpoints while
touching the model or the trainer retrains. Delete ``.cache/acceptance`` to
force a rebuild.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DIFFASR_CACHE", ROOT / ".cache" / "acceptance"))
TRAINING_MODULES = ("numerics", "data", "model", "diffusion", "curriculum", "ar", "pipeline", "config")

ACCEPTANCE_LINES: list[str] = []


def _cache_key(cfg) -> str:
    import diffasr

    src = Path(diffasr.__file__).parent
    h = hashlib.sha256(cfg.to_text().encode())
    for name in TRAINING_MODULES:
        h.update((src / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def run_config():
    from diffasr.config import RunConfig

    return RunConfig()


@pytest.fixture(scope="session")
def trained(run_config):
    """Output directory holding corpus, all stage checkpoints and ``pipeline_timing.json``."""
    from diffasr import pipeline as P

    out = CACHE / _cache_key(run_config)
    done = out / "pipeline_timing.json"
    if not done.exists():
        logging.basicConfig(level=logging.INFO)
        P.run_pipeline(run_config, out)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    summary = CACHE / "acceptance_summary.json"
    summary.parent.mkdir(parents=True, exist_ok=True)
    current = json.loads(summary.read_text()) if summary.exists() else {}
    current[str(number)] = line
    summary.write_text(json.dumps(current, indent=2) + "\n")

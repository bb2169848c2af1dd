"""Sectioned ``key = value`` run configuration with typed defaults."""

from __future__ import annotations

import configparser
import copy
import io
from dataclasses import replace
from pathlib import Path
from typing import Any

from .curriculum import DEFAULT_STAGES, StageConfig
from .data import SynthSpec
from .errors import ConfigError
from .model import ModelConfig
from .pdd import STANDARD_SCHEDULE, PddConfig

_STAGE_KEYS = {
    "base_lr": float,
    "warmup_ratio": float,
    "weight_decay": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "llrd_gamma": float,
    "schedule_unit": str,
    "augment": bool,
    "val_wer_utts": int,
}


def _stage_defaults(name: str) -> dict[str, Any]:
    cfg = DEFAULT_STAGES[name]
    return {k: getattr(cfg, k) for k in _STAGE_KEYS}


DEFAULTS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0},
    "data": {
        "n_utts": 2000,
        "len_min": 20,
        "len_max": 60,
        "long_frac": 0.1,
        "long_min": 50,
        "source_words": 60000,
        "n_text_utts": 4000,
        "f_min": SynthSpec.f_min,
        "f_max": SynthSpec.f_max,
        "d_feat": SynthSpec.d_feat,
        "noise_sigma": SynthSpec.noise_sigma,
        "codebook_seed": SynthSpec.codebook_seed,
        "max_frames": SynthSpec.max_frames,
        "duration_edges": [0.0, 0.5, 1.0, 1.5, 2.0],
    },
    "model": {
        "d_model": ModelConfig.d_model,
        "n_heads": ModelConfig.n_heads,
        "n_enc_layers": ModelConfig.n_enc_layers,
        "n_dec_layers": ModelConfig.n_dec_layers,
        "ffn_mult": ModelConfig.ffn_mult,
        "max_canvas_len": ModelConfig.max_canvas_len,
        "init_seed": ModelConfig.init_seed,
    },
    "stage0e": _stage_defaults("0e"),
    "stage0d": _stage_defaults("0d"),
    "stage1": _stage_defaults("1"),
    "stage2": _stage_defaults("2"),
    "ar": _stage_defaults("ar"),
    "pdd": {"k": 15, "schedule": list(STANDARD_SCHEDULE), "temperature": 1.0, "seed": 0},
    "eval": {"split": "test", "seeds": [0, 1, 2, 3, 4], "max_utts": 0},
    "bench": {"repeats": 5, "bucket_edges": [0.0, 0.9, 1.2, 2.0], "per_bucket": 10, "fixed_window": True},
}

_TYPES: dict[str, dict[str, Any]] = {
    sec: {k: (_STAGE_KEYS[k] if sec.startswith("stage") or sec == "ar" else type(v)) for k, v in keys.items()}
    for sec, keys in DEFAULTS.items()
}
for _k in ("d_feat", "f_min", "f_max", "codebook_seed", "max_frames"):
    _TYPES["data"][_k] = int
_TYPES["data"]["noise_sigma"] = float


def _parse_list(text: str, item=float) -> list:
    text = text.strip().strip("[]")
    if not text:
        return []
    return [item(x) for x in text.replace(" ", "").split(",")]


def _coerce(section: str, key: str, raw: Any) -> Any:
    kind = _TYPES[section][key]
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind is list:
            item = int if default and isinstance(default[0], int) and not isinstance(default[0], bool) else float
            return _parse_list(raw, item)
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if key == "llrd_gamma" and raw.strip().lower() in ("none", ""):
            return None
        if kind is type(None):
            return float(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


class RunConfig:
    """Effective configuration: defaults <- file <- command-line overrides."""

    def __init__(self, values: dict[str, dict[str, Any]] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, keys in (values or {}).items():
            self.update(section, keys)

    def update(self, section: str, keys: dict[str, Any]) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in keys.items():
            if key not in self.values[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            self.values[section][key] = _coerce(section, key, raw)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        cfg = cls()
        if path is None:
            return cfg
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            cfg.update(section, dict(parser.items(section)))
        return cfg

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def synth_spec(self) -> SynthSpec:
        d = self.values["data"]
        return SynthSpec(d["f_min"], d["f_max"], d["d_feat"], d["noise_sigma"], d["codebook_seed"], d["max_frames"])

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(d_feat=self.values["data"]["d_feat"], max_frames=self.values["data"]["max_frames"], **m)

    def stage_config(self, stage: str) -> StageConfig:
        section = {"0e": "stage0e", "0d": "stage0d", "1": "stage1", "2": "stage2", "ar": "ar"}[stage]
        return replace(DEFAULT_STAGES[stage], seed=self.seed, **self.values[section])

    def pdd_config(self) -> PddConfig:
        p = self.values["pdd"]
        try:
            return PddConfig(k=p["k"], schedule=tuple(p["schedule"]), temperature=p["temperature"], rng_seed=p["seed"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            parser[section] = {
                k: (", ".join(str(x) for x in v) if isinstance(v, list) else str(v)) for k, v in keys.items()
            }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, directory: str | Path, name: str = "effective_config.ini") -> Path:
        path = Path(directory) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

import json

import pytest

from diffasr import cli
from diffasr.config import RunConfig
from diffasr.errors import ConfigError

TINY_INI = """
[data]
n_utts = 100
n_text_utts = 50
source_words = 20000

[model]
d_model = 32
n_heads = 2
n_enc_layers = 1
n_dec_layers = 2

[stage0e]
max_epochs = 1
[stage0d]
max_epochs = 1
[stage1]
max_epochs = 1
val_wer_utts = 2
[stage2]
max_epochs = 1
val_wer_utts = 2
[ar]
max_epochs = 1

[pdd]
k = 3

[eval]
max_utts = 6
seeds = 0, 1

[bench]
repeats = 1
per_bucket = 1
bucket_edges = 0, 0.6, 0.9, 2.0
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_defaults_match_stock_settings():
    cfg = RunConfig()
    p = cfg.pdd_config()
    assert (p.k, p.schedule, p.temperature) == (15, (1.0, 0.9, 0.85, 0.8), 1.0)
    assert cfg["bench"]["repeats"] == 5
    assert cfg.stage_config("2").llrd_gamma == 0.9
    assert cfg.stage_config("1").seed == cfg.seed


def test_unknown_keys_and_sections_rejected(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nd_modle = 3\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    bad.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    bad.write_text("[model]\nd_model = big\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_config_text_round_trip(tmp_path, tiny_config):
    cfg = RunConfig.load(tiny_config)
    path = cfg.write(tmp_path)
    assert RunConfig.load(path).values == cfg.values


def test_usage_errors_exit_2(tmp_path, capsys):
    assert cli.main(["gen-data", "--seed", "abc", "--out", str(tmp_path)]) == 2
    assert cli.main(["train", "--stage", "7", "--out", str(tmp_path)]) == 2
    assert cli.main(["decode", "--schedule", "0.5,0.4", "--out", str(tmp_path)]) == 2
    assert cli.main(["decode", "--steps", "7", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[pdd]\nwidth = 3\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main([]) == 2


def test_dependency_errors_exit_1(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--stage", "0e", "--config", str(tiny_config), "--out", str(out)]) == 1
    assert "gen-data" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert cli.main(["train", "--stage", "1", "--config", str(tiny_config), "--out", str(out)]) == 1
    assert "0e" in capsys.readouterr().err
    assert cli.main(["train", "--stage", "2", "--config", str(tiny_config), "--out", str(out)]) == 1
    assert "stage 1" in capsys.readouterr().err


def test_gen_data_is_byte_identical_per_seed(tmp_path, tiny_config):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    for out in (a, b):
        assert cli.main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
    assert cli.main(["gen-data", "--config", str(tiny_config), "--seed", "1", "--out", str(c)]) == 0
    corpus = (a / "data" / "corpus.jsonl").read_bytes()
    assert corpus == (b / "data" / "corpus.jsonl").read_bytes()
    assert corpus != (c / "data" / "corpus.jsonl").read_bytes()
    stats = json.loads((a / "data" / "stats.json").read_text())
    assert "p99" in stats["token_length"]
    assert (a / "data" / "effective_config.ini").exists()


def test_output_lock_is_exclusive(tmp_path):
    from diffasr.errors import DiffAsrError

    with cli.output_lock(tmp_path):
        with pytest.raises(DiffAsrError):
            with cli.output_lock(tmp_path):
                pass
    with cli.output_lock(tmp_path):
        pass


def test_full_cli_pipeline_on_tiny_config(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    base = ["--config", str(tiny_config), "--out", str(out)]
    assert cli.main(["gen-data", *base]) == 0
    assert cli.main(["stats", *base]) == 0
    for stage in ("0e", "0d", "1", "2", "ar"):
        assert cli.main(["train", "--stage", stage, *base]) == 0, stage
        log = (out / "ckpt" / stage / "train_log.jsonl").read_text().splitlines()
        assert [json.loads(l)["epoch"] for l in log] == [0, 1]
        assert (out / "ckpt" / stage / "effective_config.ini").exists()
    manifest = (out / "ckpt" / "0e" / "manifest.txt").read_text()
    assert "surrogate" in manifest

    assert cli.main(["decode", *base]) == 0
    report = json.loads((out / "decode" / "pdd-test" / "report.json").read_text())
    assert report["pdd"]["k"] == 3 and "oracle_wer_pooled" in report
    records = (out / "decode" / "pdd-test" / "records.jsonl").read_text().splitlines()
    assert len(records) == 6 and all(json.loads(r)["decoder_calls"] == 4 for r in records)

    assert cli.main(["decode", "--ablate-conditioning", *base]) == 0
    assert json.loads((out / "decode" / "pdd-ablated-test" / "report.json").read_text())["ablated_conditioning"]
    assert cli.main(["decode", "--engine", "ar", *base]) == 0
    assert cli.main(["decode", "--engine", "single", "--steps", "2", *base]) == 0
    single = [json.loads(l) for l in (out / "decode" / "single-test" / "records.jsonl").read_text().splitlines()]
    assert all(r["decoder_calls"] == 2 for r in single)

    assert cli.main(["ablate", "--study", "schedule", *base]) == 0
    rows = json.loads((out / "ablate" / "schedule.json").read_text())
    assert [1.0, 0.7, 0.5, 0.3] in [r["schedule"] for r in rows]
    assert all({"wer", "oracle_wer"} <= set(r) for r in rows)

    assert cli.main(["bench", *base]) == 0
    for engine in ("pdd", "ar"):
        header = (out / "bench" / f"{engine}_records.csv").read_text().splitlines()[0]
        assert "decoder_calls" in header and "emitted_tokens" in header
        assert (out / "bench" / f"{engine}_curve.csv").exists()
    assert (out / "bench" / "effective_config.ini").exists()

    assert cli.main(["make-report", *base]) == 0
    text = (out / "report.md").read_text()
    assert "Latency" in text and "PDD sweep" in text

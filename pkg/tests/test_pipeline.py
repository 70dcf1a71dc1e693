import csv
import io

import numpy as np
import pytest

from xdomcap import cli
from xdomcap import config as xconfig
from xdomcap import pipeline as pl
from xdomcap.config import ConfigError, ExperimentConfig

TINY = {
    "world.n_source": "120", "world.n_target_images": "60", "world.n_target_sentences": "60", "world.n_eval": "8",
    "world.n_finetune": "30", "world.min_frequency": "1",
    "captioner.embed_dim": "8", "captioner.hidden_dim": "12",
    "dc.embed_dim": "6", "dc.widths": "2,3", "dc.filters": "6",
    "mc.embed_dim": "6", "mc.hidden_dim": "8", "mc.fusion_dim": "6",
    "pretrain.epochs": "2", "pretrain.learning_rate": "0.005",
    "train.iterations": "0", "train.critic_batch": "12", "train.M": "2", "train.K": "1", "train.image_batch": "2",
    "planning.K": "1", "run.finetune_epochs": "1", "run.max_pretrain_loss": "100",
}


def tiny(**extra):
    return ExperimentConfig().with_overrides({**TINY, **extra})


def read_report(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


# -- config -------------------------------------------------------------------

def test_config_round_trip():
    cfg = tiny(seed="4")
    back = xconfig.loads(cfg.dumps())
    assert back == cfg
    assert back.dc.widths == (2, 3) and back.seed == 4


def test_config_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError):
        xconfig.loads("train.nonsense = 1\n")
    with pytest.raises(ConfigError):
        xconfig.loads("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError):
        xconfig.loads("train.seed = 1\n")   # derived from the top-level seed
    with pytest.raises(ConfigError):
        xconfig.loads("train.iterations = many\n")
    with pytest.raises(ConfigError):
        xconfig.loads("just words\n")


def test_config_comments_and_bools():
    cfg = xconfig.loads("# a comment\nrun.finetune = no  # trailing\ntrain.baseline = yes\n")
    assert cfg.run.finetune is False and cfg.train.baseline is True


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        xconfig.loads("train.critic_batch = 10\n")


# -- pipeline -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    return pl.run_pipeline(tiny(), tmp_path_factory.mktemp("run") / "r")


def test_pipeline_writes_every_artifact(tiny_run):
    from pathlib import Path
    d = Path(tiny_run.run_dir)
    for name in ("config.txt", "manifest.txt", "report.csv", "critic_fraction.csv", "pretrain/loss.csv",
                 "adapt_both/train_log.csv", "adapt_dc/dc/manifest.txt", "finetune/manifest.txt",
                 "decode/both_plan.jsonl", "eval/pretrained_greedy.csv"):
        assert (d / name).exists(), name
    assert tiny_run.failed_stage == "" and tiny_run.finished


def test_report_rows(tiny_run):
    from pathlib import Path
    rows = read_report(Path(tiny_run.run_dir) / "report.csv")
    keys = [(r["method"], r["decode"]) for r in rows]
    assert keys[0] == ("Source Pre-trained", "greedy")
    assert ("Ours(+MC+DC)", "plan") in keys and ("Source Pre-trained", "plan") not in keys
    assert ("Fine-tuning", "beam") in keys and ("Fine-tuning", "plan") not in keys
    assert len(rows) == 2 * 2 + 3 * 3


def test_zero_iterations_leave_captioner_unchanged(tiny_run):
    from pathlib import Path
    rows = {(r["method"], r["decode"]): r for r in read_report(Path(tiny_run.run_dir) / "report.csv")}
    for m in ("Ours(+MC)", "Ours(+DC)", "Ours(+MC+DC)"):
        for d in ("greedy", "beam"):
            a, b = rows[(m, d)], rows[("Source Pre-trained", d)]
            assert {k: a[k] for k in pl.REPORT_COLUMNS} == {k: b[k] for k in pl.REPORT_COLUMNS}


def test_pipeline_is_deterministic(tiny_run, tmp_path):
    from pathlib import Path
    again = pl.run_pipeline(tiny(), tmp_path / "again")
    assert (Path(again.run_dir) / "report.csv").read_text() == (Path(tiny_run.run_dir) / "report.csv").read_text()
    assert again.input_hash == tiny_run.input_hash


def test_manifest_round_trip(tiny_run):
    back = pl.RunManifest.load(tiny_run.run_dir)
    assert back.stages == tiny_run.stages and back.config == tiny_run.config


def test_failure_names_the_stage(tmp_path):
    cfg = tiny(**{"run.max_pretrain_loss": "0.001"})
    with pytest.raises(pl.StageError) as info:
        pl.run_pipeline(cfg, tmp_path / "bad")
    assert info.value.stage == "adapt"
    man = pl.RunManifest.load(tmp_path / "bad")
    assert man.failed_stage == "adapt:mc" and "not pretrained" in man.error
    assert "pretrain" in man.stages and "adapt:mc" not in man.stages


def test_content_hash_is_git_blob_hash():
    assert pl.content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


# -- command line ---------------------------------------------------------------

def test_cli_stages(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    (tmp_path / "tiny.cfg").write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    common = ["--config", "tiny.cfg"]
    assert cli.main(["gen-data", *common, "--out", "data"]) == 0
    assert (tmp_path / "data" / "vocab.txt").exists()
    assert cli.main(["pretrain", *common, "--data", "data", "--out", "pre"]) == 0
    assert cli.main(["adapt", *common, "--data", "data", "--pretrained", "pre", "--out", "ad",
                     "--critic", "dc", "--set", "train.iterations=1"]) == 0
    assert cli.main(["decode", "--data", "data", "--model", "ad/captioner", "--critics", "ad", "--mode", "plan",
                     "--K", "1", "--out", "dec.jsonl"]) == 0
    assert "critic-decided fraction" in capsys.readouterr().out
    assert cli.main(["eval", "--candidates", "dec.jsonl", "--references", "data/target_eval.jsonl",
                     "--out", "ev.csv", "--method", "x", "--decode", "plan"]) == 0
    row = read_report(tmp_path / "ev.csv")[0]
    assert row["method"] == "x" and 0 <= float(row["Bleu-1"]) <= 1


def test_cli_finetune_requires_flag(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    assert cli.main(["gen-data", "--set", "world.n_source=40", "--out", "d"]) == 0
    code = cli.main(["finetune", "--data", "d", "--pretrained", "nowhere", "--out", "ft"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error [finetune]:")


def test_cli_reports_missing_input(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    assert cli.main(["pretrain", "--data", "missing", "--out", "p"]) == 1
    assert capsys.readouterr().err.startswith("error [pretrain]:")


def test_cli_report_merges_runs(tiny_run, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    assert cli.main(["report", tiny_run.run_dir, "--out", "merged.csv"]) == 0
    assert (tmp_path / "merged.csv").read_text().startswith("method,decode,Bleu-1")


def test_cli_bad_override(capsys):
    assert cli.main(["gen-data", "--set", "world.bogus=1", "--out", "x"]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_desk_config_and_flag(tmp_path, monkeypatch):
    cfg = xconfig.desk_config(seed=4, train__iterations=7)
    assert cfg.seed == 4 and cfg.train.iterations == 7
    assert cfg.train.warmup_rounds == int(xconfig.DESK["train.warmup_rounds"])
    monkeypatch.setenv(pl.RUN_ROOT_ENV, str(tmp_path))
    args = cli.build_parser().parse_args(["gen-data", "--desk", "--set", "train.iterations=9", "--out", "w"])
    got = cli._config(args)
    assert got.pretrain.label_smoothing == float(xconfig.DESK["pretrain.label_smoothing"])
    assert got.train.iterations == 9

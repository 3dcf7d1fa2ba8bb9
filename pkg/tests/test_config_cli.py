import csv
import io
import logging
from pathlib import Path

import pytest

from gridadd.cli import build_parser, main
from gridadd.config import (
    ConfigError,
    default_config,
    dumps_config,
    load_config,
    loads_config,
    smoke_config,
)

ROOT = Path(__file__).resolve().parents[1]


def test_table_one_defaults():
    m = default_config().model
    assert (m.d_emb, m.dropout, m.s2g_hidden, m.kernel, m.groups, m.heads) == (64, 0.1, 64, 3, 8, 64)
    assert (m.ut_hidden, m.ctx_hidden, m.halt_hidden, m.context_len, m.ctx_heads, m.max_steps, m.eps) == (256, 64, 128, 3, 8, 40, 0.05)
    t = default_config().train
    assert (t.epochs, t.steps_per_epoch, t.lr_max, t.lr_min, t.lr_period, t.clip_norm, t.beta_reg) == (510, 10, 1e-3, 5e-5, 30, 10.0, 5e-2)


def test_variants():
    assert default_config("noGroups").model.groups == 1
    sasa = default_config("SASA").model
    assert sasa.groups == sasa.heads == 8
    assert not default_config("fixedTime").model.halting
    assert default_config("ponderReg").model.regularizer == "kl"
    assert default_config("base").model.regularizer == "er"


def test_variant_constraints():
    with pytest.raises(ConfigError, match="SASA requires g=h"):
        loads_config("[model]\nvariant = \"SASA\"\nheads = 64\n")
    with pytest.raises(ConfigError, match="noGroups requires g=1"):
        loads_config("[model]\nvariant = \"noGroups\"\ngroups = 8\n")
    with pytest.raises(ConfigError):
        loads_config("[model]\nvariant = \"other\"\n")


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        loads_config("[model]\nd_embed = 3\n")
    with pytest.raises(ConfigError, match="unknown section"):
        loads_config("[optim]\nlr = 1\n")


def test_missing_keys_default_and_logged(caplog):
    with caplog.at_level(logging.INFO, logger="gridadd.config"):
        cfg = loads_config("[model]\nd_emb = 32\nheads = 32\n")
    assert cfg.model.d_emb == 32 and cfg.model.ut_hidden == 256
    assert any("ut_hidden" in r.message for r in caplog.records)


@pytest.mark.parametrize("make", [default_config, smoke_config, lambda: default_config("SASA")])
def test_round_trip(make):
    cfg = make()
    text = dumps_config(cfg)
    again = loads_config(text)
    assert again == cfg and dumps_config(again) == text


def test_shipped_configs_load():
    assert load_config(ROOT / "configs" / "base.cfg") == default_config()
    assert load_config(ROOT / "configs" / "smoke.cfg") == smoke_config()


def test_run_name_uses_hash_and_seed():
    a, b = default_config(), default_config()
    b.seed = 7
    assert a.hash() == b.hash() and a.run_name() != b.run_name()
    b.model.dropout = 0.2
    assert a.hash() != b.hash()


def test_cli_rejects_unknown(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_cli_gen(tmp_path, capsys):
    assert main(["gen", "--terms", "2,3", "--digits", "1,4", "-n", "5", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    for line in lines:
        expr, result = line.split("\t")
        assert sum(int(t) for t in expr[:-1].split("+")) == int(result)
    assert main(["gen", "-n", "3", "--out", str(tmp_path / "d.tsv")]) == 0
    assert len((tmp_path / "d.tsv").read_text().splitlines()) == 3


def test_cli_train_eval_analyze(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GRIDADD_OUT", str(tmp_path))
    assert main(["--deterministic", "train", "--preset", "tiny", "--seed", "7", "--epochs", "1"]) == 0
    ckpt = Path(capsys.readouterr().out.strip())
    assert ckpt.exists() and ckpt.parent.parent == tmp_path and ckpt.parent.name.endswith("-s7")
    assert (ckpt.parent / "metrics.jsonl").exists() and (ckpt.parent / "config.cfg").exists()

    assert main(["eval", "--checkpoint", str(ckpt), "--suite", "smoke", "--n-samples", "8"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["suite", "terms_range", "digits_range", "char_acc", "seq_acc", "mean_steps", "n_samples"]
    assert len(rows) == 4 and (ckpt.parent / "eval-smoke.csv").exists()

    assert main(["analyze", "--checkpoint", str(ckpt), "--n-samples", "8", "--max-terms", "2"]) == 0
    written = capsys.readouterr().out.split()
    names = {Path(p).name for p in written}
    assert {"actions.csv", "actions.svg", "attention.svg", "taxonomy.csv", "halting.svg", "training_steps.svg"} <= names
    for p in written:
        assert Path(p).stat().st_size > 0

    assert main(["overtrain", "--checkpoint", str(ckpt), "--epochs", "1"]) == 0


def test_cli_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\nvariant = \"SASA\"\nheads = 64\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "SASA requires g=h" in capsys.readouterr().err


def test_parser_subcommands():
    parser = build_parser()
    choices = parser._subparsers._group_actions[0].choices
    assert set(choices) == {"gen", "train", "overtrain", "eval", "analyze", "gradcheck"}

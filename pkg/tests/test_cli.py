import json
import subprocess
import sys
import time

import pytest

from hierlogic import cli
from hierlogic import kb as kbm

QUICK = ["--set", "d=8", "--set", "precision=float64", "--epochs", "3", "--restarts", "1",
         "--set", "pool_warmup=1"]


@pytest.fixture(scope="module")
def es_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("es")
    assert cli.main(["gen-es", "--n", "10", "--out", str(out)]) == 0
    return out


def _train(es_dir, out, *extra):
    return cli.main(["--workers", "1", *extra, "train", "--kb", str(es_dir), "--out", str(out),
                     "--targets", "Even", *QUICK])


def test_gen_es_files(es_dir):
    for name in ("meta.tsv", "train.tsv", "valid.tsv", "test.tsv", "facts.tsv", "manifest.json"):
        assert (es_dir / name).exists()
    splits = kbm.load_split_dataset(es_dir)
    assert len(splits.all_facts()) == 15
    man = json.loads((es_dir / "manifest.json").read_text())
    assert man["config"]["n"] == 10 and set(man["kb_digests"]) >= {"full", "train", "test"}


def test_pipeline(es_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(es_dir, run) == 0
    for name in ("checkpoint.npz", "report.json", "rules.txt", "manifest.json"):
        assert (run / name).exists()
    man = json.loads((run / "manifest.json").read_text())
    assert man["seed"] == 0 and man["config"]["d"] == 8 and man["config"]["epochs"] == 3
    assert man["command"][:2] == ["hierlogic", "--workers"]
    assert man["started"] <= man["finished"]

    capsys.readouterr()
    assert cli.main(["extract", "--checkpoint", str(run / "checkpoint.npz")]) == 0
    text = capsys.readouterr().out
    assert text.startswith("Even(X) ←")
    assert cli.main(["extract", "--checkpoint", str(run / "checkpoint.npz"), "--variable-form"]) == 0
    assert "Even(X) ←" in capsys.readouterr().out

    rules = tmp_path / "rules.txt"
    rules.write_text("Even(X) ← Even(φ_Succ(φ_Succ(X)))\n")
    assert cli.main(["eval", "--rules", str(rules), "--kb", str(es_dir)]) == 0
    out = capsys.readouterr().out
    assert "accuracy" in out and "queries" in out
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--kb", str(es_dir),
                     "--out", str(tmp_path / "ev.txt")]) == 0
    assert (tmp_path / "ev.txt.manifest.json").exists()


def test_seed_reproducible(es_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(es_dir, a, "--seed", "4") == 0
    time.sleep(2.1)  # past zip timestamp granularity
    assert _train(es_dir, b, "--seed", "4") == 0
    for name in ("checkpoint.npz", "rules.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    assert [e["loss"] for e in ra["epochs"]] == [e["loss"] for e in rb["epochs"]]


def test_flag_conflicts(es_dir, tmp_path, capsys):
    rules = tmp_path / "r.txt"
    rules.write_text("Even(X) ← Even(X)\n")
    code = cli.main(["eval", "--rules", str(rules), "--checkpoint", "x.npz", "--kb", str(es_dir)])
    assert code == cli.EXIT_USAGE
    assert "flag conflict" in capsys.readouterr().err
    assert cli.main(["eval", "--kb", str(es_dir)]) == cli.EXIT_USAGE
    assert cli.main(["extract", "--checkpoint", "x", "--ast", "--variable-form"]) == cli.EXIT_USAGE


def test_bad_inputs(tmp_path):
    assert cli.main(["gen-es", "--n", "1", "--out", str(tmp_path / "x")]) == cli.EXIT_ERROR
    assert cli.main(["extract", "--checkpoint", str(tmp_path / "none.npz")]) == cli.EXIT_IO
    assert cli.main(["train", "--kb", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO


def test_config_from_environment(es_dir, tmp_path, monkeypatch):
    conf = tmp_path / "x.conf"
    conf.write_text("d=8\nepochs=2\nprecision=float64\nseed=9\nbogus_key=1\n")
    monkeypatch.setenv(cli.CONFIG_ENV, str(conf))
    assert cli.main(["train", "--kb", str(es_dir), "--out", str(tmp_path / "o")]) == cli.EXIT_ERROR
    conf.write_text("d=8\nepochs=2\nprecision=float64\nseed=9\n")
    assert cli.main(["train", "--kb", str(es_dir), "--out", str(tmp_path / "o"),
                     "--targets", "Even"]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["seed"] == 9 and man["config"]["epochs"] == 2
    settings = cli.resolve_settings(None, ["epochs=5"], lr=0.5)
    assert settings["epochs"] == "5" and settings["lr"] == 0.5 and settings["d"] == "8"


def test_gen_comp(tmp_path):
    assert cli.main(["gen-comp", "--n", "30", "--out", str(tmp_path)]) == 0
    splits = kbm.load_split_dataset(tmp_path)
    assert {"R1", "R2", "R3"} <= {p.name for p in splits.predicates}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hierlogic", "check-grad", "--set", "d=4",
                          "--max-coords", "1"], capture_output=True, text=True, timeout=600)
    assert res.returncode == 0, res.stderr
    assert "PASS" in res.stdout

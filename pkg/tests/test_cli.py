import subprocess
import sys

import pytest

from osafl import cli

SMALL = """
[experiment]
name = "small"
protocols = ["osafl", "fedavg"]
rounds = 2
clients = 2
hidden = [4]
test_requests = 10
[catalog]
n_files = 4
n_genres = 2
feature_dim = 4
genre_feature_dim = 2
history = 2
[devices]
dataset_size = [10, 12]
[output]
dump_streams = true
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def test_presets_list(capsys):
    assert cli.main(["presets", "list"]) == 0
    names = capsys.readouterr().out.split()
    assert "desk" in names and "full-scale" in names


def test_presets_show(capsys):
    assert cli.main(["presets", "show", "desk"]) == 0
    assert "[experiment]" in capsys.readouterr().out


def test_unknown_preset_exit_code(capsys):
    assert cli.main(["presets", "show", "nope"]) == 2
    assert "unknown preset" in capsys.readouterr().err


def test_validate(small_cfg, capsys):
    assert cli.main(["validate", "--config", str(small_cfg)]) == 0
    assert capsys.readouterr().out.startswith("ok: small")


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nrounds = -1\n")
    assert cli.main(["validate", "--config", str(bad)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_override_exit_code(small_cfg):
    assert cli.main(["run", "--config", str(small_cfg), "--trials", "0"]) == 2


def test_run_writes_outputs(small_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(small_cfg), "--out", str(out), "--seed", "3",
                     "--trials", "2", "--protocol", "fedavg"]) == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "metrics_seed3.csv", "metrics_seed4.csv", "streams_seed3.jsonl", "streams_seed4.jsonl", "summary.csv"]
    rows = (out / "metrics_seed3.csv").read_text().splitlines()
    assert len(rows) == 3 and all(",fedavg," in r for r in rows[1:])


def test_unwritable_output_exit_code(small_cfg, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert cli.main(["run", "--config", str(small_cfg), "--out", str(blocker / "x")]) == 1


def test_module_entry_point(small_cfg):
    res = subprocess.run([sys.executable, "-m", "osafl", "validate", "--config", str(small_cfg)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "ok" in res.stdout

import csv
import json

import numpy as np
import pytest

from vecmap import cli
from vecmap.config import PipelineConfig
from vecmap.tensor import ParameterStore
from vecmap import tracker

SMALL_CFG = PipelineConfig(n_queries=4, n_points=6, channels=8, n_layers=1, ffn_hidden=8, stfg_hidden=8,
                           window=(-6.0, 6.0, -6.0, 6.0), resolution=1.0, epochs=1)
WORLD = ["--window=-6,6,-6,6", "--resolution", "1.0", "--points", "6", "--channels", "8", "--lanes", "1"]


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG.to_text())
    return path


def generate(out, count=2, seed=7, frames=3, extra=()):
    return cli.main(["generate", "--count", str(count), "--seed", str(seed), "--frames", str(frames),
                     "--out", str(out), *WORLD, *extra])


def test_generate_deterministic(tmp_path):
    assert generate(tmp_path / "a") == 0
    assert generate(tmp_path / "b") == 0
    names = json.loads((tmp_path / "a" / "index.json").read_text())["scenarios"]
    assert names == ["scenario_0000.json", "scenario_0001.json"]
    for n in names + ["index.json"]:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_generate_edge_counts(tmp_path):
    assert generate(tmp_path / "z", count=0) == 0
    assert json.loads((tmp_path / "z" / "index.json").read_text())["scenarios"] == []
    assert generate(tmp_path / "one", count=1, frames=1) == 0
    scen = json.loads((tmp_path / "one" / "scenario_0000.json").read_text())
    assert len(scen["ego_poses"]) == 1


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["generate", "--count", "1", "--frames", "1", *WORLD]) == 0
    assert (tmp_path / "root" / "index.json").is_file()


def test_exit_codes(tmp_path, config_file, capsys):
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["generate", "--count", "x"]) == cli.EXIT_USAGE
    assert generate(tmp_path / "bad", extra=["--window", "1,2"]) == cli.EXIT_USAGE
    assert cli.main(["generate", "--frames", "0", "--out", str(tmp_path / "f")]) == cli.EXIT_USAGE
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert generate(blocker / "sub") == cli.EXIT_IO
    generate(tmp_path / "s")
    base = ["run", "--scenarios", str(tmp_path / "s"), "--config", str(config_file)]
    assert cli.main(base + ["--mode", "infer", "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    assert cli.main(base + ["--mode", "infer", "--checkpoint-in", str(tmp_path / "none.txt"),
                            "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert cli.main(["run", "--scenarios", str(tmp_path / "missing.json"), "--config", str(config_file),
                     "--mode", "train", "--epochs", "0", "--out", str(tmp_path / "r")]) == cli.EXIT_IO
    assert cli.main(["run", "--scenarios", str(tmp_path / "s"), "--mode", "train", "--epochs", "0",
                     "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("tau_d = 2\n")
    assert cli.main(["run", "--scenarios", str(tmp_path / "s"), "--config", str(bad_cfg), "--mode", "train",
                     "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE
    for line in capsys.readouterr().err.strip().splitlines():
        assert line.startswith("error: ") or line.startswith("usage") or line.startswith("vecmap")


def train(tmp_path, config_file, epochs, name="t"):
    out = tmp_path / name
    code = cli.main(["run", "--scenarios", str(tmp_path / "s"), "--config", str(config_file), "--mode", "train",
                     "--epochs", str(epochs), "--out", str(out)])
    assert code == 0
    return out


def test_train_zero_epochs_is_initialization(tmp_path, config_file):
    generate(tmp_path / "s")
    out = train(tmp_path, config_file, 0)
    _, state = ParameterStore.read_checkpoint(out / "checkpoint.txt")
    init = tracker.init_params(SMALL_CFG)
    assert sorted(state) == sorted(init.names())
    for n in init.names():
        assert np.array_equal(state[n], init[n].data)
    assert (out / "losses.csv").read_text() == "epoch,loss\n"
    m = cli.read_manifest(out / "manifest.json")
    assert m["mode"] == "train" and m["epochs"] == 0 and len(m["scenarios"]) == 2


def test_infer_deterministic_and_manifest_replay(tmp_path, config_file):
    generate(tmp_path / "s")
    ck = train(tmp_path, config_file, 1) / "checkpoint.txt"
    outs = []
    for name in ("i1", "i2"):
        out = tmp_path / name
        assert cli.main(["run", "--scenarios", str(tmp_path / "s" / "index.json"), "--config", str(config_file),
                         "--checkpoint-in", str(ck), "--out", str(out)]) == 0
        outs.append(out)
    replay = tmp_path / "replay"
    assert cli.main(["run", "--manifest", str(outs[0] / "manifest.json"), "--out", str(replay)]) == 0
    for out in outs[1:] + [replay]:
        for rel in ("metrics.csv", "predictions/scenario_0000.jsonl", "predictions/scenario_0001.jsonl",
                    "ground_truth/scenario_0001.jsonl"):
            assert (out / rel).read_bytes() == (outs[0] / rel).read_bytes()
    rows = list(csv.reader((outs[0] / "metrics.csv").open()))
    assert rows[0] == ["class", "metric", "threshold", "value"]
    assert any(r[:2] == ["all", "C-mAP (variant)"] for r in rows)


def test_training_loss_decreases_on_static_world(tmp_path, config_file):
    generate(tmp_path / "s", count=8, frames=2, extra=["--speed", "0"])
    out = train(tmp_path, config_file, 200)
    losses = [float(r["loss"]) for r in csv.DictReader((out / "losses.csv").open())]
    assert len(losses) == 200 and losses[-1] < losses[0]


def test_mismatched_scenario_grid_is_config_error(tmp_path, config_file):
    cli.main(["generate", "--count", "1", "--frames", "1", "--out", str(tmp_path / "s")])
    assert cli.main(["run", "--scenarios", str(tmp_path / "s"), "--config", str(config_file), "--mode", "train",
                     "--epochs", "0", "--out", str(tmp_path / "r")]) == cli.EXIT_USAGE


def test_ablate_single_row(tmp_path, config_file, capsys):
    generate(tmp_path / "s", count=3, frames=3)
    out = tmp_path / "ab"
    assert cli.main(["ablate", "--scenarios", str(tmp_path / "s"), "--config", str(config_file), "--n-list", "4",
                     "--epochs", "1", "--out", str(out)]) == 0
    rows = list(csv.reader((out / "ablation.csv").open()))
    assert rows[0] == ["n", "mAP", "C-mAP (variant)", "L_pred"]
    assert len(rows) == 2 and rows[1][0] == "4"
    assert "History Frames" in capsys.readouterr().out
    m = json.loads((out / "ablation_manifest.json").read_text())
    assert m["n_list"] == [4] and len(m["heldout"]) == 1
    assert cli.main(["ablate", "--scenarios", str(tmp_path / "s"), "--n-list", "a,b"]) == cli.EXIT_USAGE

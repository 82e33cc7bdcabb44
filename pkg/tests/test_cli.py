import csv
import json
import subprocess
import sys

import pytest

from radmamba.cli import PRESETS, build_parser, main

SUBCOMMANDS = ["synth", "train", "eval", "count", "flops", "corr", "ablate", "calibrate-dim"]


def run(argv, capsys):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "d"
    assert main(["synth", "--out", str(root), "--n-per-class", "5", "--sequence-segments", "2", "--segment-bins", "230"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert main(["train", "--config", "synthetic", "--data", str(dataset), "--epochs", "2", "--seed", "0", "--out", str(out), "--quiet"]) == 0
    return out


class TestSynth:
    def test_layout(self, dataset):
        names = sorted(p.name for p in dataset.iterdir() if p.is_dir())
        assert names == ["fall", "idle", "walk", "wave"]
        meta = json.loads((dataset / "dataset.json").read_text())
        assert meta["seed"] == 0
        assert (dataset / "sequence.rmt").exists() and (dataset / "labels.csv").exists()

    def test_two_classes(self, tmp_path, capsys):
        rc, out, _ = run(["synth", "--out", tmp_path / "two", "--classes", "2", "--n-per-class", "3"], capsys)
        assert rc == 0
        assert len([p for p in (tmp_path / "two").iterdir() if p.is_dir()]) == 2
        assert "idle" in out and "walk" in out

    def test_rerun_is_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(["synth", "--out", tmp_path / name, "--n-per-class", "3", "--seed", "4"], capsys)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_png_format(self, tmp_path, capsys):
        rc, _, _ = run(["synth", "--out", tmp_path / "p", "--n-per-class", "2", "--format", "png"], capsys)
        assert rc == 0 and list((tmp_path / "p" / "idle").glob("*.png"))


class TestTrainEval:
    def test_artifacts(self, trained):
        assert {p.name for p in trained.iterdir()} >= {"report.json", "timing.json", "checkpoint.zip"}
        report = json.loads((trained / "report.json").read_text())
        assert len(report["history"]) == 3 and "wall_time_s" not in report
        assert json.loads((trained / "timing.json").read_text())["config_hash"] == report["config_hash"]

    def test_rerun_bit_identical(self, dataset, trained, tmp_path):
        assert main(["train", "--config", "synthetic", "--data", str(dataset), "--epochs", "2", "--seed", "0", "--out", str(tmp_path / "again"), "--quiet"]) == 0
        assert (tmp_path / "again" / "report.json").read_bytes() == (trained / "report.json").read_bytes()
        assert (tmp_path / "again" / "checkpoint.zip").read_bytes() == (trained / "checkpoint.zip").read_bytes()

    def test_embedded_config_reproduces(self, dataset, trained, tmp_path):
        report = json.loads((trained / "report.json").read_text())
        cfg = {"model": report["model_config"], "train": report["train_config"]}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "c.json"), "--data", str(dataset), "--seed", "0", "--out", str(tmp_path / "x"), "--quiet"]) == 0
        assert (tmp_path / "x" / "report.json").read_bytes() == (trained / "report.json").read_bytes()

    def test_eval_classification(self, dataset, trained, tmp_path, capsys):
        rc, out, _ = run(["eval", "--checkpoint", trained / "checkpoint.zip", "--data", dataset, "--out", tmp_path / "e"], capsys)
        assert rc == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        report = json.loads((trained / "report.json").read_text())
        assert metrics["config_hash"] == report["config_hash"]
        assert metrics["accuracy"] == report["best_accuracy"]
        rows = list(csv.reader(open(tmp_path / "e" / "confusion.csv")))
        assert rows[0][1:] == ["idle", "walk", "wave", "fall"] and len(rows) == 5

    def test_eval_sequence(self, dataset, trained, tmp_path, capsys):
        rc, out, _ = run(["eval", "--checkpoint", trained / "checkpoint.zip", "--sequence", dataset / "sequence.rmt", "--stride", "59", "--out", tmp_path / "s"], capsys)
        assert rc == 0
        res = json.loads(out)
        assert res["windows"] == (460 - 224) // 59 + 1
        rows = list(csv.reader(open(tmp_path / "s" / "track.csv")))
        assert len(rows) - 1 == res["windows"]

    def test_corr_table(self, dataset, trained, capsys):
        rc, out, _ = run(["corr", "--checkpoint", trained / "checkpoint.zip", "--data", dataset, "--json"], capsys)
        assert rc == 0
        table = json.loads(out)["corr_avg"]
        assert set(table) == {"p1", "p2", "p3"}
        assert all(set(v) == {"input", "output"} for v in table.values())

    def test_flag_overrides_file(self, dataset, tmp_path, capsys):
        rc, _, _ = run(["train", "--config", "synthetic", "--data", dataset, "--epochs", "0", "--dim", "8", "--out", tmp_path / "o", "--quiet"], capsys)
        assert rc == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["model_config"]["dim"] == 8 and report["train_config"]["epochs"] == 0


class TestCosts:
    @pytest.mark.parametrize("preset", ["diat", "ci4r", "uog20"])
    def test_count_json(self, preset, capsys):
        rc, out, _ = run(["count", "--config", preset, "--json"], capsys)
        obj = json.loads(out)
        assert rc == 0 and obj["total"] == sum(r["value"] for r in obj["rows"]) and obj["config_hash"]

    def test_flops_strict(self, capsys):
        _, a, _ = run(["flops", "--config", "uog20", "--json"], capsys)
        _, b, _ = run(["flops", "--config", "uog20", "--json", "--strict"], capsys)
        assert json.loads(b)["total"] > json.loads(a)["total"]

    def test_calibrate(self, capsys):
        rc, out, _ = run(["calibrate-dim", "--config", "uog20", "--target-params", "6700", "--json"], capsys)
        assert rc == 0 and json.loads(out)["best_dim"] == 16

    def test_ablate_tiny(self, dataset, tmp_path, capsys):
        rc, _, _ = run(
            ["ablate", "--config", "synthetic", "--data", dataset, "--projections", "linear1", "--geometries", "doppler_aligned", "--factors", "2x32", "--seeds", "0", "--epochs", "1", "--out", tmp_path / "a.csv"],
            capsys,
        )
        assert rc == 0
        rows = list(csv.DictReader(open(tmp_path / "a.csv")))
        assert len(rows) == 1 and rows[0]["status"] == "ok" and rows[0]["row"] == "9"
        assert "config_hash" in json.loads((tmp_path / "a.csv.json").read_text())


class TestErrors:
    def test_all_problems_reported(self, capsys):
        rc, _, err = run(["train", "--config", "synthetic", "--dim", "5", "--lr", "-1"], capsys)
        obj = json.loads(err)
        assert rc == 2 and obj["error"] == "ConfigError" and len(obj["problems"]) == 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        rc, _, err = run(["eval", "--checkpoint", tmp_path / "none.zip", "--data", tmp_path], capsys)
        assert rc == 1 and "error" in json.loads(err)

    def test_unknown_config_file(self, capsys):
        rc, _, err = run(["count", "--config", "/nonexistent.json"], capsys)
        assert rc == 2 and json.loads(err)["error"] == "CliError"

    def test_shape_mismatch(self, dataset, capsys):
        rc, _, err = run(["train", "--config", "ci4r", "--data", dataset, "--epochs", "0"], capsys)
        assert rc != 0 and "problems" in json.loads(err)


class TestHelp:
    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_lists_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in out

    def test_console_script(self):
        res = subprocess.run([sys.executable, "-m", "radmamba.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for cmd in SUBCOMMANDS:
            assert cmd in res.stdout

    def test_presets_listed(self):
        assert set(PRESETS) >= {"diat", "ci4r", "uog20"}

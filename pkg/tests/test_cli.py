import json

import pytest

from sentinel.cli import main
from sentinel.ingest import Pipeline
from synth_kdd import stream_lines, train_lines, write_lines


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_lines(d / "train.txt", train_lines(4000, seed=31))
    normal, _ = stream_lines(700, [], seed=32)
    write_lines(d / "normal.txt", normal)
    mixed, _ = stream_lines(500, [("neptune", 200), ("normal", 300), ("smurf", 200)], seed=33)
    write_lines(d / "mixed.txt", mixed)
    assert main(["fit", str(d / "train.txt"), "--out", str(d / "model.json")]) == 0
    return d


def small(*extra):
    return ["--window", "50", "--history", "100", *extra]


class TestFit:
    def test_model_written(self, files, capsys):
        pipe = Pipeline.load(files / "model.json")
        assert pipe.safe.dim == 10
        echo = json.loads((files / "model.config.json").read_text())
        assert echo["command"] == "fit" and echo["pipeline"]["pca_dims"] == 10

    def test_pca_dims_flag(self, files, tmp_path, capsys):
        out = tmp_path / "m4.json"
        assert main(["fit", str(files / "train.txt"), "--out", str(out), "--pca-dims", "4"]) == 0
        assert Pipeline.load(out).safe.dim == 4
        text = capsys.readouterr().out
        assert "normals used" in text and "condition number" in text

    def test_empty_file(self, tmp_path):
        (tmp_path / "empty.txt").write_text("")
        assert main(["fit", str(tmp_path / "empty.txt"), "--out", str(tmp_path / "m.json")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["fit", str(tmp_path / "nope.txt")]) == 2

    def test_bad_line_named(self, files, tmp_path, capsys):
        lines = (files / "train.txt").read_text().splitlines()[:50]
        lines[9] = "1,2,3"
        write_lines(tmp_path / "bad.txt", lines)
        assert main(["fit", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "m.json")]) == 2
        assert "line 10" in capsys.readouterr().err

    def test_fit_failure(self, tmp_path):
        # Attacks only: nothing to fit the safe model on.
        write_lines(tmp_path / "atk.txt", train_lines(300, attack_fraction=1.0))
        assert main(["fit", str(tmp_path / "atk.txt"), "--out", str(tmp_path / "m.json")]) == 3


class TestDetect:
    def test_normal_slice(self, files, tmp_path, capsys):
        code = main(["detect", str(files / "model.json"), str(files / "normal.txt"),
                     "--out-dir", str(tmp_path), *small("--kappa", "5")])
        assert code == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n_alarms"] == 0 and summary["fpt_step"] is None
        assert "first passage: none" in capsys.readouterr().out

    def test_attacks(self, files, tmp_path, capsys):
        code = main(["detect", str(files / "model.json"), str(files / "mixed.txt"),
                     "--out-dir", str(tmp_path), *small()])
        assert code == 1
        out = capsys.readouterr().out
        assert "first passage: step" in out and "Landauer" in out
        rows = [json.loads(l) for l in (tmp_path / "events.ndjson").read_text().splitlines()]
        assert sum(r["is_fpt"] for r in rows) == 1

    def test_kappa_monotone(self, files, tmp_path):
        counts = {}
        for kappa in ("3", "5"):
            out = tmp_path / kappa
            main(["detect", str(files / "model.json"), str(files / "mixed.txt"),
                  "--out-dir", str(out), *small("--kappa", kappa)])
            counts[kappa] = json.loads((out / "summary.json").read_text())["n_alarms"]
        assert counts["5"] <= counts["3"]

    def test_parse_error(self, files, tmp_path):
        lines = (files / "normal.txt").read_text().splitlines()[:300] + ["bogus"]
        write_lines(tmp_path / "bad.txt", lines)
        assert main(["detect", str(files / "model.json"), str(tmp_path / "bad.txt"),
                     "--out-dir", str(tmp_path / "o"), *small()]) == 2

    def test_bad_model(self, files, tmp_path):
        (tmp_path / "m.json").write_text('{"schema_version": 1}')
        assert main(["detect", str(tmp_path / "m.json"), str(files / "normal.txt"),
                     "--out-dir", str(tmp_path / "o")]) == 3

    def test_window_too_small_for_model(self, files, tmp_path):
        assert main(["detect", str(files / "model.json"), str(files / "normal.txt"),
                     "--out-dir", str(tmp_path), "--window", "5"]) == 3

    def test_config_echo_reproduces(self, files, tmp_path):
        args = [str(files / "model.json"), str(files / "mixed.txt")]
        assert main(["detect", *args, "--out-dir", str(tmp_path / "a"), *small("--kappa", "4")]) == 1
        echo = tmp_path / "a" / "config.json"
        assert main(["detect", *args, "--out-dir", str(tmp_path / "b"), "--config", str(echo)]) == 1
        for name in ("events.ndjson", "summary.json", "config.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSimulate:
    def test_outputs(self, tmp_path, capsys):
        assert main(["simulate", "--out-dir", str(tmp_path), "--trials", "3"]) == 0
        for name in ("fpt.json", "fpt_samples.csv", "fig4a.csv", "fig4b.csv", "fig4c.csv",
                     "config.json", "events/trial_0002.ndjson", "trajectories/trial_0000.csv"):
            assert (tmp_path / name).exists(), name
        fpt = json.loads((tmp_path / "fpt.json").read_text())
        assert fpt["n_trials"] == 3 and fpt["n_detected"] == 3
        assert 160.0 <= fpt["median_fpt"] <= 164.0
        assert "median FPT" in capsys.readouterr().out

    def test_invalid_config(self, tmp_path):
        bad = {"simulation": {"sde": {"dim": 2, "drift_rate": 50.0, "dt": 0.05}}}
        (tmp_path / "c.json").write_text(json.dumps(bad))
        assert main(["simulate", "--config", str(tmp_path / "c.json"),
                     "--out-dir", str(tmp_path / "o")]) == 2

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"detector": {"kapa": 3}}')
        assert main(["simulate", "--config", str(tmp_path / "c.json"),
                     "--out-dir", str(tmp_path / "o")]) == 2

    def test_bad_factor(self, tmp_path):
        assert main(["simulate", "--out-dir", str(tmp_path), "--diffusion-factor", "0.5"]) == 2


class TestEval:
    def test_outputs(self, files, tmp_path, capsys):
        assert main(["eval", str(files / "model.json"), str(files / "mixed.txt"),
                     "--out-dir", str(tmp_path), *small()]) == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert set(m["table"]) == {"dynamic", "static_threshold"}
        assert m["seed"] == 0 and len(m["config_hash"]) == 64
        assert len(m["dataset_sha256"]["test"]) == 64
        for name in ("fig1.csv", "fig2.csv", "fig3.csv", "fig3_raw_kl.csv", "events.ndjson"):
            assert (tmp_path / name).exists()
        assert "AUC" in capsys.readouterr().out

    def test_subsample_deterministic(self, files, tmp_path):
        runs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["eval", str(files / "model.json"), str(files / "mixed.txt"),
                         "--out-dir", str(out), "--subsample", "1000", "--seed", "7", *small()]) == 0
            runs.append(out)
        for name in ("metrics.json", "fig1.csv", "fig2.csv", "fig3.csv", "events.ndjson"):
            assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
        assert json.loads((runs[0] / "metrics.json").read_text())["n_records"] == 1000

    def test_missing_labels(self, files, tmp_path):
        lines = [l.rsplit(",", 2)[0] for l in (files / "mixed.txt").read_text().splitlines()]
        write_lines(tmp_path / "nolabel.txt", lines)
        assert main(["eval", str(files / "model.json"), str(tmp_path / "nolabel.txt"),
                     "--out-dir", str(tmp_path / "o")]) == 2

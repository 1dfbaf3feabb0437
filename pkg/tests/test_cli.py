import io
import json
import re
from contextlib import redirect_stdout

import pytest

from blendmorph.cli import main
from blendmorph.sweep import read_manifest


def run_cli(argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(argv)
    return code, buf.getvalue()


SWEEP_CONFIG = {
    "a0_values": [0.25, 0.6],
    "b0_values": [0.25],
    "chi_cases": [[0.009, 0.009, 0.009], [0.006, 0.003, 0.006]],
    "base": {
        "grid": {"nx": 24, "ny": 24, "lx": 3.0, "ly": 3.0},
        "t_end": 6.0,
        "dt": 0.1,
        "noise_amp": 0.005,
        "rng_seed": 99,
    },
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full sweep -> cluster -> train -> predict-map chain in one tree."""
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "sweep.json"
    cfg.write_text(json.dumps(SWEEP_CONFIG))
    sweep_dir = root / "sweep"
    out = {}

    code, text = run_cli(["sweep", "--config", str(cfg),
                          "--out", str(sweep_dir)])
    assert code == 0
    out["sweep_dir"], out["sweep_stdout"] = sweep_dir, text
    out["manifest"] = sweep_dir / "manifest.csv"

    cluster_dir = root / "cluster"
    code, text = run_cli(["cluster", "--manifest", str(out["manifest"]),
                          "--out", str(cluster_dir), "--k-range", "1:4"])
    assert code == 0
    out["cluster_dir"], out["cluster_stdout"] = cluster_dir, text

    # composition-rule labels keep the train stage independent of k-means
    records = read_manifest(out["manifest"])
    labels = root / "labels.csv"
    rows = ["run_id,label"] + [
        f"{r.run_id},{'lean' if r.a0 < 0.4 else 'rich'}" for r in records
    ]
    labels.write_text("\n".join(rows) + "\n")
    out["labels"] = labels

    train_dir = root / "train"
    code, text = run_cli(["train", "--manifest", str(out["manifest"]),
                          "--labels", str(labels), "--out", str(train_dir)])
    assert code == 0
    out["train_dir"], out["train_stdout"] = train_dir, text
    out["model"] = train_dir / "model.gpc"

    map_dir = root / "map"
    code, text = run_cli(["predict-map", "--model", str(out["model"]),
                          "--out", str(map_dir), "--a0-range", "0.15:0.7",
                          "--b0-range", "0.15:0.35", "--resolution", "13:7"])
    assert code == 0
    out["map_dir"], out["map_stdout"] = map_dir, text
    return out


class TestSweepCommand:
    def test_tally_line_format(self, pipeline):
        first = pipeline["sweep_stdout"].splitlines()[0]
        assert re.fullmatch(
            r"State1=\d+ State2=\d+ State3a=\d+ State3b=\d+ error=\d+", first)

    def test_manifest_and_artifacts(self, pipeline):
        records = read_manifest(pipeline["manifest"])
        assert len(records) == 4
        assert all(r.state_id != "error" for r in records)
        for r in records:
            assert (pipeline["sweep_dir"] / r.snapshot_path).is_file()
            assert (pipeline["sweep_dir"] / r.image_path).is_file()

    def test_resolved_config_written(self, pipeline):
        payload = json.loads(
            (pipeline["sweep_dir"] / "config_resolved.json").read_text())
        assert payload["command"] == "sweep"
        assert payload["a0_values"] == [0.25, 0.6]
        assert payload["base"]["grid"]["nx"] == 24


class TestClusterCommand:
    def test_outputs_exist(self, pipeline):
        d = pipeline["cluster_dir"]
        for name in ("labels.csv", "wcss_vs_k.csv", "pca_model.bin",
                     "scatter_pc12.png", "config_resolved.json"):
            assert (d / name).is_file()

    def test_labels_cover_every_run(self, pipeline):
        lines = (pipeline["cluster_dir"] / "labels.csv").read_text() \
            .splitlines()
        assert lines[0] == "run_id,label"
        assert len(lines) == 5
        assert all(line.split(",")[1].startswith("c") for line in lines[1:])

    def test_wcss_csv_holds_plain_floats(self, pipeline):
        lines = (pipeline["cluster_dir"] / "wcss_vs_k.csv").read_text() \
            .splitlines()
        assert lines[0] == "k,wcss"
        for line in lines[1:]:
            k, w = line.split(",")
            int(k), float(w)

    def test_stdout_reports_method_and_k(self, pipeline):
        assert re.search(r"method=pca-kmeans q=\d+ k=\d+",
                         pipeline["cluster_stdout"])


class TestTrainCommand:
    def test_metrics_and_model(self, pipeline):
        metrics = json.loads(
            (pipeline["train_dir"] / "metrics.json").read_text())
        assert metrics["accuracy"] == 1.0
        assert sorted(metrics["classes"]) == ["lean", "rich"]
        assert metrics["n_train_augmented"] == \
            3 * metrics["n_train_original"] - metrics["n_augment_dropped"]
        assert pipeline["model"].is_file()

    def test_stdout_line(self, pipeline):
        assert re.search(r"accuracy=\d\.\d{4} \(test n=\d+, classes=\d+\)",
                         pipeline["train_stdout"])


class TestPredictMapCommand:
    def test_artifacts(self, pipeline):
        d = pipeline["map_dir"]
        for name in ("map.csv", "map.png", "map.legend.json",
                     "config_resolved.json"):
            assert (d / name).is_file()

    def test_map_csv_parses_as_plain_floats(self, pipeline):
        lines = (pipeline["map_dir"] / "map.csv").read_text().splitlines()
        assert lines[0] == "a0,b0,label,max_prob"
        assert len(lines) > 1
        for line in lines[1:]:
            a0, b0, label, mp = line.split(",")
            float(a0), float(b0), float(mp)
            assert label in ("lean", "rich")

    def test_rerun_is_byte_identical(self, pipeline, tmp_path):
        code, _ = run_cli(["predict-map", "--model", str(pipeline["model"]),
                           "--out", str(tmp_path), "--a0-range", "0.15:0.7",
                           "--b0-range", "0.15:0.35",
                           "--resolution", "13:7"])
        assert code == 0
        for name in ("map.csv", "map.png"):
            assert (tmp_path / name).read_bytes() == \
                (pipeline["map_dir"] / name).read_bytes()


class TestSimulateCommand:
    def test_short_run_with_seed_override(self, tmp_path):
        code, text = run_cli(["simulate", "--out", str(tmp_path),
                              "--seed", "1234", "--config",
                              self.write_cfg(tmp_path)])
        assert code == 0
        assert text.startswith("state=")
        resolved = json.loads((tmp_path / "config_resolved.json").read_text())
        assert resolved["rng_seed"] == 1234
        for name in ("final.chsnap", "final.png", "gibbs.csv", "result.json"):
            assert (tmp_path / name).is_file()
        gibbs = (tmp_path / "gibbs.csv").read_text().splitlines()
        assert gibbs[0] == "step,t,gibbs"
        assert len(gibbs) == 2 + 2        # header + initial + one per step
        summary = json.loads((tmp_path / "result.json").read_text())
        assert set(summary) == {"state", "completed", "diverged_at",
                                "gibbs_first", "gibbs_last"}

    @staticmethod
    def write_cfg(tmp_path):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({
            "grid": {"nx": 16, "ny": 16}, "t_end": 0.2, "dt": 0.1,
        }))
        return str(cfg)


class TestOperationalErrors:
    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["simulate", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2
        assert "nope.json" in capsys.readouterr().err

    def test_unknown_config_field_is_named(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"frobnicate": 1}))
        assert main(["simulate", "--config", str(cfg),
                     "--out", str(tmp_path)]) == 2
        assert "frobnicate" in capsys.readouterr().err

    def test_sweep_requires_config(self, tmp_path, capsys):
        assert main(["sweep", "--out", str(tmp_path)]) == 2
        assert "--config" in capsys.readouterr().err

    def test_sweep_rejects_unknown_field(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"a0_values": [0.3], "b0_values": [0.3],
                                   "chi_cases": [[0, 0, 0]], "bogus": 1}))
        assert main(["sweep", "--config", str(cfg),
                     "--out", str(tmp_path)]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_cluster_missing_manifest(self, tmp_path, capsys):
        assert main(["cluster", "--manifest", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)]) == 2
        capsys.readouterr()

    def test_cluster_rejects_empty_manifest(self, pipeline, tmp_path, capsys):
        header = (pipeline["manifest"]).read_text().splitlines()[0]
        empty = tmp_path / "empty.csv"
        empty.write_text(header + "\n")
        assert main(["cluster", "--manifest", str(empty),
                     "--out", str(tmp_path)]) == 2
        capsys.readouterr()

    def test_cluster_rejects_malformed_k_range(self, pipeline, tmp_path,
                                               capsys):
        assert main(["cluster", "--manifest", str(pipeline["manifest"]),
                     "--out", str(tmp_path), "--k-range", "3"]) == 2
        assert "--k-range" in capsys.readouterr().err

    def test_train_missing_labels(self, pipeline, tmp_path, capsys):
        assert main(["train", "--manifest", str(pipeline["manifest"]),
                     "--labels", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path)]) == 2
        capsys.readouterr()

    def test_predict_map_missing_model(self, tmp_path, capsys):
        assert main(["predict-map", "--model", str(tmp_path / "none.gpc"),
                     "--out", str(tmp_path)]) == 2
        assert "model" in capsys.readouterr().err

    def test_predict_map_rejects_tiny_resolution(self, pipeline, tmp_path,
                                                 capsys):
        assert main(["predict-map", "--model", str(pipeline["model"]),
                     "--out", str(tmp_path), "--resolution", "1:5"]) == 2
        assert "resolution" in capsys.readouterr().err

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--bogus"])
        assert exc.value.code == 2

    def test_missing_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

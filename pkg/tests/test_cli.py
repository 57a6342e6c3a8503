import json

import pytest

from zubov import cli
from zubov import net as nn
from zubov import ode


def run(*argv):
    return cli.run(list(argv))


@pytest.fixture(scope="module")
def cubic_run(tmp_path_factory):
    """gen-data + train on the scalar cubic; shared by downstream tests."""
    d = tmp_path_factory.mktemp("cubic")
    cfgfile = d / "run.json"
    cfgfile.write_text(json.dumps({
        "system": "cubic1d",
        "grid": [201],
        "train": {"alpha": 2.0, "psi_form": "exp", "hidden": [10, 10],
                  "max_epochs": 40, "pair_fraction": 0.05},
        "seed": 7,
        "out_dir": str(d),
    }))
    assert run("gen-data", "--config", str(cfgfile), "--out", str(d / "dataset.csv")) == 0
    assert run("train", "--config", str(cfgfile), "--data", str(d / "dataset.csv"),
               "--out-dir", str(d)) == 0
    return d, cfgfile


class TestGenData:
    def test_csv_and_meta(self, cubic_run):
        d, _ = cubic_run
        samples = ode.load_samples(d / "dataset.csv")
        assert len(samples) == 201
        meta = json.loads((d / "dataset.csv.meta.json").read_text())
        assert meta["rows"] == 201
        assert meta["config"]["system"] == "cubic1d"
        assert meta["seed"] == 7

    def test_grid_flag_overrides(self, tmp_path):
        out = tmp_path / "d.csv"
        assert run("gen-data", "--system", "cubic1d", "--grid", "11",
                   "--out", str(out)) == 0
        assert len(ode.load_samples(out)) == 11

    def test_vdp_grid_row_count(self, tmp_path):
        out = tmp_path / "d.csv"
        assert run("gen-data", "--system", "reversed_vdp", "--grid", "30x30",
                   "--out", str(out)) == 0
        assert len(ode.load_samples(out)) == 900

    def test_vdp_full_reference_grid(self, tmp_path):
        # the benchmark-scale lattice: 300 x 300 = 90,000 rows
        out = tmp_path / "d.csv"
        assert run("gen-data", "--system", "reversed_vdp", "--grid", "300x300",
                   "--out", str(out)) == 0
        with open(out) as fh:
            assert sum(1 for _ in fh) == 90_001


class TestTrain:
    def test_artifacts(self, cubic_run):
        d, _ = cubic_run
        net, alpha, psi = nn.load_mlp(d / "net.json")
        assert alpha == 2.0 and psi == "exp"
        assert net.layer_sizes == (1, 10, 10, 1)
        doc = json.loads((d / "net.json").read_text())
        assert doc["meta"]["config"]["train"]["max_epochs"] == 40
        assert (d / "train_record.csv").exists()

    def test_deterministic_net_file(self, cubic_run, tmp_path):
        d, cfgfile = cubic_run
        d2 = tmp_path / "again"
        assert run("train", "--config", str(cfgfile), "--data", str(d / "dataset.csv"),
                   "--out-dir", str(d2)) == 0
        assert (d / "net.json").read_bytes() == (d2 / "net.json").read_bytes()

    def test_seed_flag_changes_net(self, cubic_run, tmp_path):
        d, cfgfile = cubic_run
        d3 = tmp_path / "seeded"
        assert run("train", "--config", str(cfgfile), "--data", str(d / "dataset.csv"),
                   "--out-dir", str(d3), "--seed", "8") == 0
        assert (d / "net.json").read_bytes() != (d3 / "net.json").read_bytes()

    def test_rerun_from_embedded_config_reproduces(self, cubic_run, tmp_path):
        # the artifact carries its resolved config; replaying it from scratch
        # (including regenerating the data) must give the same bytes back
        d, _ = cubic_run
        doc = json.loads((d / "net.json").read_text())
        replay = tmp_path / "replay.json"
        replay.write_text(json.dumps(doc["meta"]["config"]))
        assert run("gen-data", "--config", str(replay),
                   "--out", str(tmp_path / "dataset.csv")) == 0
        assert run("train", "--config", str(replay),
                   "--data", str(tmp_path / "dataset.csv"),
                   "--out-dir", str(tmp_path)) == 0
        assert (tmp_path / "net.json").read_bytes() == (d / "net.json").read_bytes()


class TestVerifyLocal:
    def test_vdp_certified_exit_zero(self, tmp_path):
        # the reference level 0.29 for the reversed Van der Pol certifies
        code = run("verify-local", "--system", "reversed_vdp", "--c", "0.29",
                   "--out-dir", str(tmp_path))
        assert code == 0
        doc = json.loads((tmp_path / "local_cert.json").read_text())
        assert doc["outcome"]["status"] == "certified"
        assert doc["P"] == [[1.5, -0.5], [-0.5, 1.0]]
        assert doc["config"]["verify"]["r"] == 0.9999

    def test_falsified_exit_three(self, tmp_path):
        code = run("verify-local", "--system", "poly2d", "--c", "2.4",
                   "--out-dir", str(tmp_path))
        assert code == 3
        doc = json.loads((tmp_path / "local_cert.json").read_text())
        assert doc["outcome"]["status"] == "falsified"
        assert len(doc["outcome"]["witness"]) == 2

    def test_unknown_exit_four(self, tmp_path):
        # a budget too small to decide returns the inconclusive exit code
        code = run("verify-local", "--system", "reversed_vdp", "--c", "0.28",
                   "--budget", "3", "--out-dir", str(tmp_path))
        assert code == 4

    def test_search_mode(self, tmp_path):
        code = run("verify-local", "--system", "reversed_vdp",
                   "--out-dir", str(tmp_path))
        assert code == 0
        doc = json.loads((tmp_path / "local_cert.json").read_text())
        assert 0.2 <= doc["c"] <= 0.5


class TestConfigErrors:
    def test_unknown_system(self):
        assert run("gen-data", "--system", "lorenz", "--out", "/tmp/x.csv") == 1

    def test_unknown_config_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"sytem": "cubic1d"}))
        assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "x.csv")) == 1

    def test_unknown_nested_key(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"train": {"alpha": 0.1, "warmup": 5}}))
        assert run("gen-data", "--config", str(bad), "--out", str(tmp_path / "x.csv")) == 1

    def test_bad_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run("gen-data", "--config", str(bad)) == 1

    def test_missing_subcommand_args(self):
        assert run("train") == 1

    def test_runtime_failure_exit_two(self, tmp_path):
        assert run("verify-roa", "--system", "reversed_vdp",
                   "--net", str(tmp_path / "missing.json")) == 2
        assert run("train", "--system", "cubic1d",
                   "--data", str(tmp_path / "missing.csv")) == 2

    def test_inline_system_definition(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({
            "system": {"name": "decay", "dim": 1, "components": ["-x1"],
                       "domain": [[-1, 1]]},
            "grid": [15],
        }))
        out = tmp_path / "d.csv"
        assert run("gen-data", "--config", str(cfg), "--out", str(out)) == 0
        assert len(ode.load_samples(out)) == 15


class TestGridCommand:
    def test_lattice_csv(self, cubic_run, tmp_path):
        d, _ = cubic_run
        out = tmp_path / "w.csv"
        assert run("grid", "--system", "cubic1d", "--net", str(d / "net.json"),
                   "--grid", "21", "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "x1,W"
        assert len(lines) == 22
        net, _, _ = nn.load_mlp(d / "net.json")
        x0, w0 = [float(v) for v in lines[1].split(",")]
        assert w0 == pytest.approx(nn.forward(net, [x0]), abs=1e-12)

    def test_dimension_mismatch(self, cubic_run, tmp_path):
        d, _ = cubic_run
        assert run("grid", "--system", "reversed_vdp", "--net", str(d / "net.json"),
                   "--grid", "9x9", "--out", str(tmp_path / "w.csv")) == 1


class TestReport:
    def test_aggregates_row(self, cubic_run):
        d, _ = cubic_run
        assert run("report", str(d)) == 0
        doc = json.loads((d / "report.json").read_text())
        row = doc["row"]
        assert row["layers"] == 2 and row["width"] == 10
        assert row["params"] == 141  # 1-10-10-1 dense stack
        assert row["epochs"] == 40
        assert row["final_loss"] is not None
        assert row["data_gen_seconds"] is not None
        assert doc["config"]["seed"] == 7

    def test_missing_net_is_config_error(self, tmp_path):
        assert run("report", str(tmp_path)) == 1

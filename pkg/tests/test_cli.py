"""Config-driven runner: validation, artifacts, exit codes and determinism."""
import csv
import json

import numpy as np
import pytest

from pursamere import cli
from pursamere.theory import CheckResult

SMALL = {
    "seed": 3,
    "dataset": {"n_train_per_class": 20, "n_test_per_class": 4},
    "schedule": {"sigma_max": 0.2, "sigma_min": 0.02, "L": 4},
    "score": {"hidden": [8], "epochs": 3},
    "purify": {"m": 2},
    "classifier": {"hidden": [4], "epochs": 3},
    "attack": {"steps": 2},
    "evaluate": {"rho_pur_list": [0.2, 0.25, 0.3]},
    "fig1": {"n_grid": 200, "n_mc": 500},
}


def write_config(tmp_path, kind, name="cfg.json", **overrides):
    cfg = json.loads(json.dumps(SMALL))
    cfg["kind"] = kind
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, config, *extra):
    out = tmp_path / "runs"
    rc = cli.main(["run", "--config", str(config), "--out", str(out), *extra])
    dirs = [p for p in out.iterdir()] if out.exists() else []
    return rc, dirs


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestKinds:
    def test_fig1(self, tmp_path):
        rc, dirs = run(tmp_path, write_config(tmp_path, "fig1"))
        assert rc == 0 and len(dirs) == 1 and dirs[0].name.startswith("fig1-")
        rows = read_csv(dirs[0] / "fig1.csv")
        assert rows[0] == ["x", "log_p_x", "ere"] and len(rows) == 201
        assert float(rows[1][0]) == 0.0 and float(rows[-1][0]) == 1.0

    def test_train_score(self, tmp_path):
        rc, dirs = run(tmp_path, write_config(tmp_path, "train-score"))
        assert rc == 0
        ckpt = json.loads((dirs[0] / "score.json").read_text())
        assert ckpt["dims"] == [3, 8, 2]
        assert len(read_csv(dirs[0] / "losses.csv")) == 4

    def test_train_classifier(self, tmp_path):
        rc, dirs = run(tmp_path, write_config(tmp_path, "train-classifier"))
        assert rc == 0
        assert json.loads((dirs[0] / "classifier.json").read_text())["kind"] == "classifier"
        assert {"score.json", "results.csv", "config.json"} <= {p.name for p in dirs[0].iterdir()}

    def test_purify_from_points_file(self, tmp_path):
        (tmp_path / "pts.csv").write_text("label,x0,x1\n0,0.3,0.35\n1,0.7,0.6\n")
        rc, dirs = run(tmp_path, write_config(tmp_path, "purify", dataset={"points_csv": "pts.csv"}))
        assert rc == 0
        rows = read_csv(dirs[0] / "purified.csv")
        assert rows[0] == ["sample_id", "label", "x0", "x1", "x_pur0", "x_pur1"] and len(rows) == 3
        assert len(read_csv(dirs[0] / "trace_sample0.csv")) == 5
        for r in rows[1:]:
            x, z = np.array(r[2:4], float), np.array(r[4:6], float)
            assert np.linalg.norm(z - x) <= 0.3 + 1e-12

    def test_attack(self, tmp_path):
        rc, dirs = run(tmp_path, write_config(tmp_path, "attack"))
        assert rc == 0
        assert len(read_csv(dirs[0] / "attack.csv")) == 9
        assert (dirs[0] / "table.txt").exists()

    def test_evaluate_tables(self, tmp_path):
        rc, dirs = run(tmp_path, write_config(tmp_path, "evaluate"))
        assert rc == 0
        names = {p.name for p in dirs[0].iterdir()}
        assert {"attack_none.csv", "attack_bpda-det_rho0.25.csv", "attack_gray-box_rho0.3.csv", "bayes.json",
                "table.csv", "table.txt"} <= names
        table = read_csv(dirs[0] / "table.csv")
        assert table[0] == ["attack", "rho_pur=0.0", "rho_pur=0.2", "rho_pur=0.25", "rho_pur=0.3"]
        assert [r[0] for r in table[1:]] == ["none", "gray-box", "bpda-det"]

    def test_byte_identical_rerun(self, tmp_path):
        config = write_config(tmp_path, "evaluate")
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", "--config", str(config), "--out", str(a)]) == 0
        assert cli.main(["run", "--config", str(config), "--out", str(b), "--threads", "4"]) == 0
        (da,), (db,) = list(a.iterdir()), list(b.iterdir())
        assert da.name == db.name
        for f in sorted(da.iterdir()):
            assert f.read_bytes() == (db / f.name).read_bytes(), f.name


class TestExitCodes:
    def test_unknown_kind(self, tmp_path, capsys):
        rc, dirs = run(tmp_path, write_config(tmp_path, "bogus"))
        assert rc == 2 and dirs == []
        assert "unknown kind" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{kind: fig1")
        rc, dirs = run(tmp_path, path)
        assert rc == 2 and dirs == []

    def test_unknown_key(self, tmp_path):
        rc, _ = run(tmp_path, write_config(tmp_path, "fig1", purify={"rho": 1.0}))
        assert rc == 2

    def test_missing_referenced_file(self, tmp_path):
        rc, _ = run(tmp_path, write_config(tmp_path, "purify", score={"checkpoint": "nope.json"}))
        assert rc == 2

    def test_invalid_values(self, tmp_path):
        assert run(tmp_path, write_config(tmp_path, "fig1", purify={"rho_pur": -1}))[0] == 2
        assert run(tmp_path, write_config(tmp_path, "fig1", attack={"threat": "white-box"}))[0] == 2
        assert run(tmp_path, write_config(tmp_path, "fig1", seed=-4))[0] == 2

    def test_numerical_abort_leaves_nothing(self, tmp_path):
        cfg = write_config(tmp_path, "train-score", schedule={"sigma_min": 0.001},
                           score={"hidden": [16], "epochs": 50, "step_size": 50.0})
        with np.errstate(over="ignore", invalid="ignore"):
            rc, dirs = run(tmp_path, cfg)
        assert rc == 3 and dirs == []

    def test_verify_exit_code_follows_checks(self, tmp_path, monkeypatch):
        def fake(passed):
            return lambda n, seed: [CheckResult("x", 1.0, 2.0, 0.0, passed)]

        monkeypatch.setattr(cli.theory, "run_all", fake(False))
        assert cli.main(["verify", "--all", "--out", str(tmp_path / "v1")]) == 1
        monkeypatch.setattr(cli.theory, "run_all", fake(True))
        assert cli.main(["verify", "--all", "--out", str(tmp_path / "v2")]) == 0
        (run_dir,) = list((tmp_path / "v2").iterdir())
        report = json.loads((run_dir / "verification_report.json").read_text())
        assert report[0]["pass"] is True


class TestConfig:
    def test_hash_ignores_key_order_and_non_semantic_fields(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path, "fig1"))
        reordered = json.loads(json.dumps(cfg, sort_keys=True))
        reordered = dict(reversed(list(reordered.items())))
        assert cli.config_hash(cfg) == cli.config_hash(reordered)
        assert cli.config_hash(cfg) == cli.config_hash({**cfg, "threads": 8, "out": "/elsewhere"})

    def test_hash_changes_with_semantic_fields(self, tmp_path):
        cfg = cli.load_config(write_config(tmp_path, "fig1"))
        assert cli.config_hash(cfg) != cli.config_hash({**cfg, "seed": 4})
        changed = json.loads(json.dumps(cfg))
        changed["purify"]["rho_sam"] = 0.06
        assert cli.config_hash(cfg) != cli.config_hash(changed)

    def test_seed_override(self, tmp_path):
        assert cli.load_config(write_config(tmp_path, "fig1"), seed=11)["seed"] == 11

    def test_env_var_sets_output_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envroot"))
        assert cli.main(["run", "--config", str(write_config(tmp_path, "fig1"))]) == 0
        assert len(list((tmp_path / "envroot").iterdir())) == 1

    def test_defaults_command(self, capsys):
        assert cli.main(["defaults", "--kind", "fig1"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["kind"] == "fig1" and set(cli.DEFAULTS) == set(payload)


def _row(metric, value, rho, attack, eid="e1"):
    return cli.ResultRow(eid, "h", metric, value, 0, rho, attack)


class TestTableReport:
    def test_single_row(self):
        csv_text, text = cli.table_report([_row("adversarial_accuracy", 0.5, 0.3, "bpda-det")])
        assert csv_text.splitlines() == ["attack,rho_pur=0.3", "bpda-det,50.00"]
        assert text.splitlines()[1].split() == ["bpda-det", "50.00"]

    def test_three_rho_values(self):
        rows = []
        for rho, (c, a) in zip((0.2, 0.25, 0.3), ((0.9, 0.6), (0.88, 0.65), (0.85, 0.7))):
            rows += [_row("clean_accuracy", c, rho, "gray-box"), _row("adversarial_accuracy", a, rho, "gray-box")]
        csv_text, _ = cli.table_report(rows)
        lines = csv_text.splitlines()
        assert lines[0] == "attack,rho_pur=0.2,rho_pur=0.25,rho_pur=0.3"
        assert lines[1] == "gray-box,90.00 / 60.00,88.00 / 65.00,85.00 / 70.00"

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            cli.table_report([])

    def test_mixed_experiments_rejected(self):
        with pytest.raises(ValueError):
            cli.table_report([_row("clean_accuracy", 1.0, 0.1, "x"), _row("clean_accuracy", 1.0, 0.1, "x", "e2")])

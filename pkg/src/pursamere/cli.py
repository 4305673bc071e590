"""Config-driven experiment runner.

    pursamere run --config exp.json [--out DIR] [--seed N] [--threads N]
    pursamere verify --all [--out DIR]
    pursamere defaults [--kind KIND]

Each run writes into ``<out>/<kind>-<hash12>``, where the hash covers every
semantic config field. Artifacts are staged in a temporary directory and moved
into place only on success. Exit codes: 0 success, 1 verification failure,
2 invalid config, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import theory
from .attacks import AttackConfig, evaluate_robustness
from .classifier import Classifier, LabeledDataset
from .experiments import (
    Pipeline,
    PipelineConfig,
    bayes_robust_accuracy,
    build_pipeline,
    derive_seed,
    split_dataset,
    train_score_model,
)
from .gmm import FIG1_SPEC, GmmSpec
from .purify import Purifier, purify, purify_many
from .score import ScoreNet, TrainConfig

log = logging.getLogger("pursamere")

OUT_ENV = "PURSAMERE_OUT"
KINDS = ("train-score", "train-classifier", "purify", "attack", "evaluate", "verify-theory", "fig1")
NON_SEMANTIC = ("out", "threads")

DEFAULTS = {
    "kind": "evaluate",
    "seed": 0,
    "dataset": {
        "classes": [s.to_dict() for s in PipelineConfig().class_specs],
        "n_train_per_class": 500,
        "n_test_per_class": 100,
        "points_csv": None,
    },
    "schedule": {"sigma_max": 0.2, "sigma_min": 0.01, "L": 30},
    "score": {"hidden": [64, 64], "conditioning": "sigma_input", "batch_size": 64, "epochs": 300,
              "step_size": 0.02, "checkpoint": None},
    "purify": {"rho_pur": 0.3, "rho_sam": 0.05, "m": 4, "antithetic": False, "eta_max": 0.02,
               "eta_min": 0.0002, "lr_rule": "decreasing"},
    "classifier": {"hidden": [32, 32], "epochs": 100, "augment": True, "checkpoint": None},
    "attack": {"norm": 2, "budget": 0.15, "steps": 20, "step_size": None, "eot_samples": 1,
               "threat": "bpda-det", "eot_fresh_banks": False},
    "evaluate": {"rho_pur_list": [0.2, 0.25, 0.3], "threats": ["gray-box", "bpda-det"]},
    "fig1": {"sigma": 0.1, "n_grid": 2000, "n_mc": 20000},
    "theory": {"n_mc_expansion": 1000000},
}


class ConfigError(ValueError):
    pass


# -- config handling --------------------------------------------------------

def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        if key not in defaults and key not in NON_SEMANTIC:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(defaults.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be an object")
            out[key] = _merge(defaults[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            user = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    if "kind" not in user:
        raise ConfigError("config is missing 'kind'")
    if user["kind"] not in KINDS:
        raise ConfigError(f"unknown kind {user['kind']!r}; expected one of {', '.join(KINDS)}")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    validate(cfg, Path(path).parent)
    return cfg


def validate(cfg: dict, base: Path) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    try:
        [GmmSpec.from_dict(c) for c in cfg["dataset"]["classes"]]
        pc = pipeline_config(cfg)
        pc.schedule()
        pc.purify_config()
        attack_config(cfg)
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for section, key in (("score", "checkpoint"), ("classifier", "checkpoint"), ("dataset", "points_csv")):
        ref = cfg[section][key]
        if ref is not None:
            p = Path(ref) if Path(ref).is_absolute() else base / ref
            if not p.is_file():
                raise ConfigError(f"{section}.{key} does not exist: {ref}")
            cfg[section][key] = str(p)


def config_hash(cfg: dict) -> str:
    """sha256 of canonical JSON over the semantic fields."""
    semantic = {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def pipeline_config(cfg: dict) -> PipelineConfig:
    ds, sc, pu, cl, sh = cfg["dataset"], cfg["score"], cfg["purify"], cfg["classifier"], cfg["schedule"]
    return PipelineConfig(
        class_specs=tuple(GmmSpec.from_dict(c) for c in ds["classes"]),
        n_train_per_class=int(ds["n_train_per_class"]),
        n_test_per_class=int(ds["n_test_per_class"]),
        sigma_max=float(sh["sigma_max"]),
        sigma_min=float(sh["sigma_min"]),
        levels=int(sh["L"]),
        score_hidden=tuple(sc["hidden"]),
        conditioning=sc["conditioning"],
        score_train=TrainConfig(int(sc["batch_size"]), int(sc["epochs"]), float(sc["step_size"])),
        rho_pur=float(pu["rho_pur"]),
        rho_sam=float(pu["rho_sam"]),
        m=int(pu["m"]),
        antithetic=bool(pu["antithetic"]),
        lr_rule=pu["lr_rule"],
        eta_max=float(pu["eta_max"]),
        eta_min=float(pu["eta_min"]),
        classifier_epochs=int(cl["epochs"]),
        classifier_hidden=tuple(cl["hidden"]),
        augment=bool(cl["augment"]),
        seed=int(cfg["seed"]),
    )


def attack_config(cfg: dict, threat: str | None = None) -> AttackConfig:
    a = dict(cfg["attack"])
    if threat is not None:
        a["threat"] = threat
    return AttackConfig(a["norm"], a["budget"], int(a["steps"]), a["step_size"], int(a["eot_samples"]),
                        a["threat"], bool(a["eot_fresh_banks"]), derive_seed(cfg["seed"], "attack"))


# -- results ----------------------------------------------------------------

@dataclass
class ResultRow:
    experiment_id: str
    config_hash: str
    metric: str
    value: float
    seed: int
    rho_pur: float | None = None
    attack: str | None = None


def write_rows(path: Path, rows: list[ResultRow]) -> None:
    fields = list(ResultRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            d = asdict(r)
            d["value"] = repr(float(d["value"]))
            w.writerow(d)


def table_report(rows: list[ResultRow]) -> tuple[str, str]:
    """Clean/adversarial accuracy per (rho_pur, attack) as CSV text and aligned text."""
    if not rows:
        raise ValueError("table_report needs at least one result row")
    ids = {r.experiment_id for r in rows}
    if len(ids) != 1:
        raise ValueError(f"rows come from several experiments: {sorted(ids)}")
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.attack, r.rho_pur), {})[r.metric] = r.value
    attacks = list(dict.fromkeys(r.attack for r in rows))
    rhos = list(dict.fromkeys(r.rho_pur for r in rows))

    def fmt(attack, rho):
        c = cells.get((attack, rho))
        if c is None:
            return ""
        parts = [f"{100 * c[k]:.2f}" for k in ("clean_accuracy", "adversarial_accuracy") if k in c]
        return " / ".join(parts) if parts else ""

    header = ["attack"] + [f"rho_pur={rho}" for rho in rhos]
    body = [[str(a)] + [fmt(a, rho) for rho in rhos] for a in attacks]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    text = "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
                     for row in [header, *body]) + "\n"
    return buf.getvalue(), text


# -- experiment kinds -------------------------------------------------------

def _save_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _load_or_train_score(cfg, pc, stage: Path):
    ref = cfg["score"]["checkpoint"]
    if ref is not None:
        return ScoreNet.load(ref)
    train_d, _ = split_dataset(pc.class_specs, pc.n_train_per_class, pc.n_test_per_class, pc.seed)
    res = train_score_model(train_d.x, pc)
    res.net.save(stage / "score.json", pc.schedule(), {"seed": pc.seed})
    return res.net


def _points(cfg, pc) -> LabeledDataset:
    ref = cfg["dataset"]["points_csv"]
    if ref is None:
        return split_dataset(pc.class_specs, pc.n_train_per_class, pc.n_test_per_class, pc.seed)[1]
    arr = np.loadtxt(ref, delimiter=",", skiprows=1, ndmin=2)
    return LabeledDataset(arr[:, 1:], arr[:, 0].astype(int))


def run_train_score(cfg, stage: Path, threads: int, rows: list) -> None:
    pc = pipeline_config(cfg)
    train_d, _ = split_dataset(pc.class_specs, pc.n_train_per_class, pc.n_test_per_class, pc.seed)
    res = train_score_model(train_d.x, pc)
    res.net.save(stage / "score.json", pc.schedule(), {"seed": pc.seed})
    with open(stage / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "dsm_loss"])
        w.writerows([i, repr(float(v))] for i, v in enumerate(res.losses))
    rows.append(("final_dsm_loss", res.losses[-1], None, None))


def run_train_classifier(cfg, stage: Path, threads: int, rows: list) -> None:
    pc = pipeline_config(cfg)
    score = _load_or_train_score(cfg, pc, stage) if pc.augment else None
    pipe = build_pipeline(pc, threads, score)
    pipe.classifier.save(stage / "classifier.json", {"seed": pc.seed})
    rows.append(("clean_accuracy", pipe.classifier.accuracy(pipe.test_data.x, pipe.test_data.y), None, None))


def run_purify(cfg, stage: Path, threads: int, rows: list) -> None:
    pc = pipeline_config(cfg)
    score = _load_or_train_score(cfg, pc, stage)
    data = _points(cfg, pc)
    pcfg = pc.purify_config()
    xp = purify_many(data.x, score, pc.schedule(), pcfg, threads)
    _, trace = purify(data.x[0], score, pc.schedule(), pcfg)
    trace.to_csv(stage / "trace_sample0.csv")
    d = data.x.shape[1]
    with open(stage / "purified.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"] + [f"x{i}" for i in range(d)] + [f"x_pur{i}" for i in range(d)])
        for i, (x, z) in enumerate(zip(data.x, xp)):
            w.writerow([i, int(data.y[i])] + [repr(float(v)) for v in x] + [repr(float(v)) for v in z])
    rows.append(("mean_displacement", float(np.mean(np.linalg.norm(xp - data.x, axis=1))), pc.rho_pur, None))


def _classifier_pipeline(cfg, pc, stage, threads):
    score = _load_or_train_score(cfg, pc, stage)
    if cfg["classifier"]["checkpoint"] is not None:
        train_d, test_d = split_dataset(pc.class_specs, pc.n_train_per_class, pc.n_test_per_class, pc.seed)
        return Pipeline(pc, train_d, test_d, score, [], Classifier.load(cfg["classifier"]["checkpoint"]))
    pipe = build_pipeline(pc, threads, score)
    pipe.classifier.save(stage / "classifier.json", {"seed": pc.seed})
    return pipe


def run_attack(cfg, stage: Path, threads: int, rows: list) -> None:
    pc = pipeline_config(cfg)
    pipe = _classifier_pipeline(cfg, pc, stage, threads)
    attack = attack_config(cfg)
    pur = Purifier(pipe.score, pc.schedule(), pc.purify_config())
    rep = evaluate_robustness(pipe.test_data.x, pipe.test_data.y, pipe.classifier, pur, attack, threads)
    rep.to_csv(stage / "attack.csv")
    rows.append(("clean_accuracy", rep.clean_accuracy, pc.rho_pur, attack.threat))
    rows.append(("adversarial_accuracy", rep.adversarial_accuracy, pc.rho_pur, attack.threat))


def run_evaluate(cfg, stage: Path, threads: int, rows: list) -> None:
    pc = pipeline_config(cfg)
    pipe = _classifier_pipeline(cfg, pc, stage, threads)
    x, y = pipe.test_data.x, pipe.test_data.y
    base = evaluate_robustness(x, y, pipe.classifier, None, attack_config(cfg, "gray-box"), threads)
    base.to_csv(stage / "attack_none.csv")
    rows.append(("clean_accuracy", base.clean_accuracy, 0.0, "none"))
    rows.append(("adversarial_accuracy", base.adversarial_accuracy, 0.0, "none"))
    for threat in cfg["evaluate"]["threats"]:
        for rho in cfg["evaluate"]["rho_pur_list"]:
            pur = Purifier(pipe.score, pc.schedule(), pc.purify_config(float(rho)))
            rep = evaluate_robustness(x, y, pipe.classifier, pur, attack_config(cfg, threat), threads)
            rep.to_csv(stage / f"attack_{threat}_rho{rho}.csv")
            rows.append(("clean_accuracy", rep.clean_accuracy, float(rho), threat))
            rows.append(("adversarial_accuracy", rep.adversarial_accuracy, float(rho), threat))
    if x.shape[1] == 2:
        bayes = bayes_robust_accuracy(pc.class_specs, x, y, float(cfg["attack"]["budget"]))
        _save_json(stage / "bayes.json", bayes)


def run_verify_theory(cfg, stage: Path, threads: int, rows: list) -> bool:
    checks = theory.run_all(int(cfg["theory"]["n_mc_expansion"]), int(cfg["seed"]))
    (stage / "verification_report.json").write_text(theory.report_json(checks) + "\n")
    for c in checks:
        log.info(c.line())
        rows.append((f"{c.name}.pass", float(c.passed), None, None))
    return all(c.passed for c in checks)


def run_fig1(cfg, stage: Path, threads: int, rows: list) -> None:
    f = cfg["fig1"]
    xs, logp, ere = theory.fig1_curves(float(f["sigma"]), int(f["n_grid"]), int(f["n_mc"]), int(cfg["seed"]), FIG1_SPEC)
    with open(stage / "fig1.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "log_p_x", "ere"])
        w.writerows([repr(float(a)), repr(float(b)), repr(float(c))] for a, b, c in zip(xs, logp, ere))
    check = theory.check_fig1(float(f["sigma"]), int(f["n_grid"]), n_mc=int(f["n_mc"]), seed=int(cfg["seed"]))
    rows.append(("fig1_max_distance", check.measured, None, None))


RUNNERS = {
    "train-score": run_train_score,
    "train-classifier": run_train_classifier,
    "purify": run_purify,
    "attack": run_attack,
    "evaluate": run_evaluate,
    "verify-theory": run_verify_theory,
    "fig1": run_fig1,
}


def execute(cfg: dict, out_root: Path, threads: int = 1) -> tuple[Path, bool]:
    """Run one experiment; returns the run directory and the verification flag."""
    digest = config_hash(cfg)
    run_dir = out_root / f"{cfg['kind']}-{digest[:12]}"
    out_root.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_root))
    try:
        raw: list = []
        ok = RUNNERS[cfg["kind"]](cfg, stage, threads, raw)
        rows = [ResultRow(run_dir.name, digest, m, float(v), cfg["seed"], rho, atk) for m, v, rho, atk in raw]
        write_rows(stage / "results.csv", rows)
        if any(r.attack is not None for r in rows):
            table_csv, table_txt = table_report([r for r in rows if r.attack is not None])
            (stage / "table.csv").write_text(table_csv)
            (stage / "table.txt").write_text(table_txt)
        _save_json(stage / "config.json", {k: v for k, v in cfg.items() if k not in NON_SEMANTIC})
        if run_dir.exists():
            shutil.rmtree(run_dir)
        os.replace(stage, run_dir)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return run_dir, ok is not False


# -- entry point ------------------------------------------------------------

def _out_root(arg) -> Path:
    return Path(arg or os.environ.get(OUT_ENV, "runs"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pursamere", description="Purification experiments on toy score models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    r.add_argument("--seed", type=int, help="override the global seed")
    r.add_argument("--threads", type=int, default=1)
    v = sub.add_parser("verify", help="run the theory verification suite")
    v.add_argument("--all", action="store_true", required=True)
    v.add_argument("--out")
    v.add_argument("--seed", type=int, default=0)
    d = sub.add_parser("defaults", help="print the reference config with every default")
    d.add_argument("--kind", choices=KINDS, default="evaluate")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "defaults":
        print(json.dumps({**DEFAULTS, "kind": args.kind}, indent=1))
        return 0
    try:
        if args.command == "verify":
            cfg = _merge(DEFAULTS, {"kind": "verify-theory", "seed": args.seed})
            threads = 1
        else:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg = load_config(args.config, args.seed)
            threads = args.threads
        run_dir, ok = execute(cfg, _out_root(args.out), threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    print(run_dir)
    if not ok:
        print("verification failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

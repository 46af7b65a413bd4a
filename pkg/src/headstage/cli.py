"""Command-line entry point: synth, train, optimize, run, compare.

Every command reads an optional JSON config file (``--config``) whose keys
must belong to that command's defaults below; ``--set key=value`` overrides
single keys (values parsed as JSON when possible).  Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("headstage")

DEFAULTS = {
    "synth": {
        "out_dir": "data/synthetic",
        "seed": 0,
        "n_electrodes": 32,
        "duration_s": 10.0,
        "firing_rate_hz": 20.0,
        "noise_sigma_uv": 5.0,
        "amplitude_min_uv": 20.0,
        "amplitude_max_uv": 300.0,
    },
    "train": {
        "model": "data/model.aqm",
        "dataset": "data/training.npz",
        "metrics": "data/train_metrics.json",
        "n_samples": 2000,
        "seed": 0,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "batch_size": 32,
        "max_epochs": 3000,
        "patience": 1000,
        "export_csv": None,
    },
    "optimize": {
        "data_dir": "data/synthetic",
        "model": "data/model.aqm",
        "epsilon": 0.05,
        "thresholds_sigma": [-3.0, -3.5, -4.0, -4.5, -5.0],
        "out": "data/config.json",
        "packet": "data/config.bin",
        "epoch": 1,
    },
    "run": {
        "data_dir": "data/synthetic",
        "model": "data/model.aqm",
        "epsilon": 0.05,
        "thresholds_sigma": [-3.0, -3.5, -4.0, -4.5, -5.0],
        "scheme": "adaptive",
        "fault": None,
        "drop_epoch": 2,
        "recalibration_interval_s": None,
        "duration_s": None,
        "out_dir": "data/run",
    },
    "compare": {
        "data_dir": "data/synthetic",
        "model": "data/model.aqm",
        "epsilon": 0.05,
        "thresholds_sigma": [-3.0, -3.5, -4.0, -4.5, -5.0],
        "schemes": ["adaptive", "dct", "cs"],
        "uniform_factors": [2, 3],
        "dct_keep": [8, 16, 32],
        "cs_measurements": [16, 32, 64],
        "block_len": 128,
        "sensing_seed": 0,
        "out": "data/compare.csv",
    },
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(command: str, path: str | None = None, overrides=()) -> dict:
    """Defaults for ``command`` updated by a JSON file and ``key=value`` overrides."""
    cfg = dict(DEFAULTS[command])
    layers = []
    if path:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        layers.append(("config file", doc))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = _parse_value(v)
    layers.append(("--set", pairs))
    for origin, doc in layers:
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown {command} keys in {origin}: {', '.join(unknown)}")
        cfg.update(doc)
    return cfg


def _settings(cfg):
    from .optimizer import OptimizerSettings

    return OptimizerSettings(float(cfg["epsilon"]), threshold_grid_sigmas=tuple(cfg["thresholds_sigma"]))


def _load_inputs(cfg):
    from .predictor import MlpModel
    from .synthetic import load_recording

    model_path = Path(cfg["model"])
    if not model_path.exists():
        raise FileNotFoundError(f"{model_path} not found; run `headstage train` first")
    return load_recording(cfg["data_dir"]), MlpModel.load(model_path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg) -> int:
    from .synthetic import save_recording, spaced_bank, synthesize_recording

    bank = spaced_bank(int(cfg["n_electrodes"]), int(cfg["seed"]),
                       (float(cfg["amplitude_min_uv"]), float(cfg["amplitude_max_uv"])))
    rec = synthesize_recording(bank, float(cfg["duration_s"]), int(cfg["seed"]),
                               float(cfg["noise_sigma_uv"]), float(cfg["firing_rate_hz"]))
    out = save_recording(rec, cfg["out_dir"])
    counts = [len(t) for t in rec.spike_times_s]
    print(f"wrote {rec.trace.n_channels} channels x {len(rec.trace.samples[0])} samples to {out}")
    print(f"ground-truth events per electrode: min {min(counts)}, max {max(counts)}")
    return 0


def _train_key(cfg) -> dict:
    return {k: cfg[k] for k in ("n_samples", "seed", "learning_rate", "momentum", "batch_size",
                                "max_epochs", "patience")}


def cmd_train(cfg) -> int:
    from .predictor import Dataset, Hyperparams, MlpModel, build_dataset, evaluate, train
    from .synthetic import template_bank

    model_path, data_path, metrics_path = Path(cfg["model"]), Path(cfg["dataset"]), Path(cfg["metrics"])
    key = _train_key(cfg)
    if model_path.exists() and data_path.exists() and metrics_path.exists():
        cached = json.loads(metrics_path.read_text())
        if cached.get("config") == key:
            model = MlpModel.load(model_path)
            _, test = _split(Dataset.load(data_path), cached["n_train"])
            m = evaluate(model, test)
            print(f"cached model {model_path}: held-out MAE fnr {m['mae_fnr']:.4f}, "
                  f"fpr {m['mae_fpr']:.4f} (n={m['n']})")
            return 0
    n = int(cfg["n_samples"])
    t0 = time.perf_counter()
    train_set, test_set = build_dataset(template_bank(n, int(cfg["seed"])), n_samples=n,
                                        seed=int(cfg["seed"]))
    t_gen = time.perf_counter() - t0
    hp = Hyperparams(float(cfg["learning_rate"]), int(cfg["batch_size"]), int(cfg["max_epochs"]),
                     int(cfg["patience"]), momentum=float(cfg["momentum"]), seed=int(cfg["seed"]))
    model = train(train_set, hp)
    t_train = time.perf_counter() - t0 - t_gen
    m = evaluate(model, test_set)
    for p in (model_path, data_path, metrics_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    model.save(model_path)
    _concat(train_set, test_set).save(data_path)
    if cfg["export_csv"]:
        _concat(train_set, test_set).write_csv(cfg["export_csv"])
    metrics_path.write_text(json.dumps({"config": key, "n_train": len(train_set), **m,
                                        "generate_s": t_gen, "train_s": t_train}, indent=2) + "\n")
    print(f"trained on {len(train_set)} samples in {t_gen + t_train:.1f} s; "
          f"held-out MAE fnr {m['mae_fnr']:.4f}, fpr {m['mae_fpr']:.4f} (n={m['n']})")
    return 0


def _concat(a, b):
    from .predictor import Dataset

    return Dataset(*(np.concatenate([getattr(a, f), getattr(b, f)])
                     for f in ("X", "Y", "template_index", "factor", "threshold_sigma", "seed")))


def _split(ds, n_train: int):
    return ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, len(ds)))


def cmd_optimize(cfg) -> int:
    from .evaluation import calibration_sigmas
    from .optimizer import optimize_array
    from .telemetry import ConfigPacket, encode_config

    rec, model = _load_inputs(cfg)
    cv = optimize_array(rec.templates, model, _settings(cfg), noise_sigma_uv=calibration_sigmas(rec.trace),
                        epoch=int(cfg["epoch"]))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    cv.save_json(out)
    Path(cfg["packet"]).write_bytes(encode_config(ConfigPacket.from_config(cv)))
    n_flag = sum(s.flagged for s in cv.schedules)
    print(f"mean factor {cv.mean_factor():.2f}, acquisition CR {cv.acquisition_cr():.2f}, "
          f"{n_flag} flagged; wrote {out}")
    return 0


def cmd_run(cfg) -> int:
    from .evaluation import run_comparison, write_report
    from .telemetry import run_session

    rec, model = _load_inputs(cfg)
    settings = _settings(cfg)
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    scheme = cfg["scheme"]
    if scheme in ("dct", "cs"):
        rows = run_comparison(rec, model, settings, schemes=(scheme,))
        write_report(rows, out / "report.csv")
        for r in rows:
            print(f"{r.scheme:8s} {r.config:22s} CR_tx {r.cr_tx:7.2f}  SDE {r.sde:.4f}")
        return 0
    if scheme != "adaptive":
        raise ConfigError(f"unknown scheme {scheme!r}")
    fault = cfg["fault"]
    if fault not in (None, "downlink-drop"):
        raise ConfigError(f"unknown fault {fault!r}")
    interval = cfg["recalibration_interval_s"]
    drop = ()
    if fault == "downlink-drop":
        drop = (int(cfg["drop_epoch"]),)
        if interval is None:
            # the drop needs a later epoch to hit
            dur = cfg["duration_s"] or rec.trace.duration_s
            interval = dur / (int(cfg["drop_epoch"]) + 1)
    session = run_session(rec, model, settings, duration_s=cfg["duration_s"],
                          recalibration_interval_s=interval, drop_config_epochs=drop)
    session.write_jsonl(out / "session.jsonl")
    reports = session.of("report")
    with (out / "electrodes.csv").open("w") as fh:
        fh.write("electrode_id,factor,threshold_uv,flagged,n_true,n_detected,n_matched,fnr,fpr,sde\n")
        for r in reports:
            fh.write(",".join(str(r[k]) for k in ("electrode_id", "factor", "threshold_uv", "flagged",
                                                  "n_true", "n_detected", "n_matched", "fnr", "fpr",
                                                  "sde")) + "\n")
    summary = session.of("summary")[0]
    factors = [r["factor"] for r in reports if r["factor"] is not None]
    unflagged = [r["sde"] for r in reports if r["flagged"] is False]
    print(f"epochs {summary['n_epochs']}, stale {summary['stale']}, "
          f"mean factor {np.mean(factors) if factors else float('nan'):.2f}, "
          f"CR_acq {summary['cr_acq'] or float('nan'):.2f}")
    if unflagged:
        print(f"unflagged electrodes: mean SDE {np.mean(unflagged):.4f}, "
              f"{np.mean(np.array(unflagged) <= settings.epsilon + 0.03):.0%} within eps + 0.03")
    return 0


def cmd_compare(cfg) -> int:
    from .baselines import CsConfig, DctConfig
    from .evaluation import run_comparison, write_report

    schemes = list(cfg["schemes"] or [])
    if not schemes:
        raise ConfigError("no schemes given; choose from adaptive, dct, cs")
    rec, model = _load_inputs(cfg)
    n = int(cfg["block_len"])
    dct = [DctConfig(n, int(k)) for k in cfg["dct_keep"]]
    cs = [CsConfig(n, int(m), int(cfg["sensing_seed"])) for m in cfg["cs_measurements"]]
    rows = run_comparison(rec, model, _settings(cfg), schemes=schemes, dct_configs=dct, cs_configs=cs,
                          uniform_factors=tuple(int(u) for u in cfg["uniform_factors"]))
    out = write_report(rows, Path(cfg["out"]))
    for r in sorted(rows, key=lambda r: (r.scheme, r.config)):
        print(f"{r.scheme:8s} {r.config:22s} CR_acq {r.cr_acq:5.2f}  CR_tx {r.cr_tx:7.2f}  "
              f"SDE {r.sde:.4f}  ops {r.executed_ops}")
    print(f"wrote {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "optimize": cmd_optimize, "run": cmd_run,
            "compare": cmd_compare}

HELP = {
    "synth": "write a synthetic multi-electrode recording with ground truth",
    "train": "simulate the training set and fit the error predictor",
    "optimize": "compute the per-electrode configuration vector",
    "run": "closed-loop session (adaptive) or a single baseline sweep",
    "compare": "CR-versus-SDE table across schemes",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headstage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="JSON file of settings")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one setting; repeatable")
        if name == "run":
            p.add_argument("--fault", choices=["downlink-drop"], help="inject a downlink fault")
            p.add_argument("--scheme", choices=["adaptive", "dct", "cs"])
        if name == "compare":
            p.add_argument("--schemes", help="comma-separated subset of adaptive,dct,cs")
        if name in ("synth", "train"):
            p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "fault", None):
        overrides.append(f"fault={json.dumps(args.fault)}")
    if getattr(args, "scheme", None):
        overrides.append(f"scheme={json.dumps(args.scheme)}")
    if getattr(args, "schemes", None) is not None:
        names = [s for s in args.schemes.split(",") if s]
        overrides.append(f"schemes={json.dumps(names)}")
    try:
        cfg = load_config(args.command, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            parser.print_usage(sys.stderr)
        return 2

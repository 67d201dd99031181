"""Command-line interface: ``mgprnn {simulate,train,evaluate,score,bench} --config run.json``.

A run config is one JSON object::

    {
      "cohort": "cohort.jsonl",          # written by simulate, read by the rest
      "checkpoint": "checkpoint.json",   # default: <out>/checkpoint.json
      "out_dir": "run",                  # default for --out
      "synthetic": {...SyntheticSpec fields...},
      "data": {"n_variables": null, "log_variables": []},
      "train": {...TrainConfig fields...},
      "evaluate": {"horizons": "0..12", "target_sensitivity": 0.85},
      "bench": {"sizes": [50, 200, 800, 3200], "ks": [8, 16, 32], "M": 2, "dense_cap": 3200}
    }

Relative paths are taken relative to the config file. Every command writes
``resolved_config.json`` into its output directory.

Exit codes: 2 configuration error, 3 data error (including missing files),
4 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .data import SyntheticSpec, StandardizationStats, generate_cohort, load_cohort, save_cohort, split_cohort
from .errors import ConfigError, DataError, GenerationError, NumericalError
from .krylov import dense_sqrt, kron_matvec, lanczos_sqrt_vec, ou_kernel_matrix
from .metrics import horizon_sweep, parse_horizons, write_sweep_csv
from .training import Model, TrainConfig, cohort_dims, fit, score_cohort

log = logging.getLogger("mgprnn")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4

SECTION_DEFAULTS = {
    "data": {"n_variables": None, "log_variables": []},
    "evaluate": {"horizons": "0..12", "target_sensitivity": 0.85},
    "bench": {"sizes": [50, 200, 800, 3200], "ks": [8, 16, 32], "M": 2, "length_scale": 4.0,
              "noise_var": 0.1, "dense_cap": 3200, "seed": 0},
}
TOP_KEYS = {"cohort", "checkpoint", "out_dir", "synthetic", "data", "train", "evaluate", "bench"}


# ---------------------------------------------------------------------------
# config handling


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")


def resolve_config(raw: dict, args) -> dict:
    """Fill defaults, apply command-line overrides and validate every section."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", raw, TOP_KEYS)
    cfg = copy.deepcopy(raw)
    for name, defaults in SECTION_DEFAULTS.items():
        given = cfg.get(name) or {}
        _check_keys(name, given, defaults)
        cfg[name] = {**defaults, **given}

    syn = dict(cfg.get("synthetic") or {})
    _check_keys("synthetic", syn, {f.name for f in fields(SyntheticSpec)})
    if args.seed is not None:
        syn["seed"] = args.seed
    try:
        cfg["synthetic"] = SyntheticSpec(**syn).to_json()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic: {exc}") from None

    tr = dict(cfg.get("train") or {})
    if args.seed is not None:
        tr["seed"] = args.seed
    if args.variant is not None:
        tr["model_variant"] = args.variant
    try:
        cfg["train"] = TrainConfig.from_dict(tr).to_dict()
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    if args.seed is not None:
        cfg["bench"]["seed"] = args.seed
    if args.horizons is not None:
        cfg["evaluate"]["horizons"] = args.horizons
    parse_horizons(cfg["evaluate"]["horizons"])
    cfg.setdefault("cohort", "cohort.jsonl")
    cfg.setdefault("checkpoint", None)
    cfg.setdefault("out_dir", ".")
    return cfg


def _path(base, p):
    return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(base, p))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


class Run:
    def __init__(self, cfg, config_path, out):
        self.cfg = cfg
        self.base = os.path.dirname(os.path.abspath(config_path))
        self.out = out if out is not None else _path(self.base, cfg["out_dir"])
        os.makedirs(self.out, exist_ok=True)
        _write_json(os.path.join(self.out, "resolved_config.json"), cfg)

    @property
    def cohort(self):
        return _path(self.base, self.cfg["cohort"])

    @property
    def checkpoint(self):
        p = self.cfg["checkpoint"]
        return _path(self.base, p) if p else os.path.join(self.out, "checkpoint.json")

    def train_config(self):
        return TrainConfig.from_dict(self.cfg["train"])

    def load(self, stats=None):
        if not os.path.exists(self.cohort):
            raise DataError(f"cohort file not found: {self.cohort}")
        d = self.cfg["data"]
        return load_cohort(self.cohort, n_variables=d["n_variables"], log_variables=d["log_variables"],
                           stats=stats)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(run: Run):
    spec = SyntheticSpec(**run.cfg["synthetic"])
    records, manifest = generate_cohort(spec)
    path = os.path.join(run.out, os.path.basename(run.cfg["cohort"]))
    save_cohort(path, records)
    _write_json(os.path.join(run.out, "manifest.json"), manifest)
    counts = np.zeros(spec.M, dtype=int)
    for r in records:
        counts += np.bincount(r.variables, minlength=spec.M)
    n_pos = sum(r.label for r in records)
    summary = {"n": len(records), "n_positive": n_pos,
               "prevalence": n_pos / len(records) if records else 0.0,
               "obs_per_variable": counts.tolist()}
    print(json.dumps(summary))
    return summary


def cmd_train(run: Run):
    cfg = run.train_config()
    records, stats = run.load()
    splits = split_cohort(records)
    if not splits["train"] or not splits["valid"]:
        raise ConfigError("cohort too small: empty train or valid split")
    dims = cohort_dims(records)
    if run.cfg["data"]["n_variables"]:
        dims = (run.cfg["data"]["n_variables"],) + dims[1:]
    model, history = fit(splits["train"], splits["valid"], cfg, dims=dims)
    model.save(run.checkpoint, standardization=stats.to_json(), train_config=cfg.to_dict())
    with open(os.path.join(run.out, "train_log.jsonl"), "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(json.dumps(history[-1], sort_keys=True))
    return model, history


def _load_model(run: Run):
    if not os.path.exists(run.checkpoint):
        raise DataError(f"checkpoint not found: {run.checkpoint}")
    model, meta = Model.load(run.checkpoint)
    stats = StandardizationStats.from_json(meta["standardization"])
    return model, stats


def cmd_evaluate(run: Run):
    model, stats = _load_model(run)
    cfg = run.train_config()
    if cfg.model_variant != model.variant:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "model_variant": model.variant})
    records, _ = run.load(stats)
    test = split_cohort(records)["test"]
    ev = run.cfg["evaluate"]
    rows = horizon_sweep(test, lambda recs: score_cohort(model, recs, cfg), parse_horizons(ev["horizons"]),
                         ev["target_sensitivity"])
    path = os.path.join(run.out, "sweep.csv")
    write_sweep_csv(path, rows)
    print(open(path).read(), end="")
    return rows


def cmd_score(run: Run):
    model, stats = _load_model(run)
    cfg = TrainConfig.from_dict({**run.cfg["train"], "model_variant": model.variant})
    records, _ = run.load(stats)
    test = split_cohort(records)["test"]
    scores = score_cohort(model, test, cfg)
    path = os.path.join(run.out, "scores.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "score"])
        for r, s in zip(test, scores):
            w.writerow([r.id, r.label, repr(float(s))])
    print(f"scored {len(test)} test encounters -> {path}")
    return scores


def bench_operator(MX, M, length_scale, noise_var):
    """Prior-plus-noise covariance of an ``M``-variable GP on an hourly grid."""
    if MX % M:
        raise ConfigError(f"bench size {MX} is not a multiple of M={M}")
    X = MX // M
    i = np.arange(M)
    K = 0.5 ** np.abs(i[:, None] - i[None, :])
    KX = ou_kernel_matrix(np.arange(X), np.arange(X), length_scale)
    return K, KX, noise_var


def cmd_bench(run: Run):
    b = run.cfg["bench"]
    rng = np.random.default_rng(b["seed"])
    report = []
    for MX in b["sizes"]:
        K, KX, s2 = bench_operator(MX, b["M"], b["length_scale"], b["noise_var"])
        xi = rng.standard_normal(MX)
        ref, dense_time = None, None
        if MX > b["dense_cap"]:
            print(f"MX={MX}: dense square root skipped (dense_cap={b['dense_cap']})")
        else:
            t0 = time.perf_counter()
            Sigma = np.kron(K, KX) + s2 * np.eye(MX)
            ref = dense_sqrt(Sigma) @ xi
            dense_time = time.perf_counter() - t0
        for k in b["ks"]:
            t0 = time.perf_counter()
            approx = lanczos_sqrt_vec(lambda v: kron_matvec(K, KX, v) + s2 * v, xi, k)
            lz_time = time.perf_counter() - t0
            dev = None if ref is None else float(np.max(np.abs(approx - ref)))
            row = {"MX": MX, "k": min(k, MX), "lanczos_seconds": lz_time, "dense_seconds": dense_time,
                   "max_abs_deviation": dev}
            report.append(row)
            print(json.dumps(row))
    _write_json(os.path.join(run.out, "bench.json"), report)
    return report


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
            "score": cmd_score, "bench": cmd_bench}


def build_parser():
    p = argparse.ArgumentParser(prog="mgprnn", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run config (JSON)")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--threads", type=int, help="cap BLAS threads")
    p.add_argument("--variant", help="overrides train.model_variant")
    p.add_argument("--horizons", help='evaluation horizons, e.g. "0..12" or "0,6,12"')
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        cfg = resolve_config(raw, args)
        run = Run(cfg, args.config, args.out)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](run)
        else:
            COMMANDS[args.command](run)
    except (ConfigError, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())

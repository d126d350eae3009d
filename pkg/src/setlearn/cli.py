"""Command-line interface.

Configuration precedence: built-in defaults, then the ``--config`` JSON
file, then command-line flags. Every command prints the hash of the resolved
configuration.

Exit codes: 0 success, 1 verification or metric failure, 2 configuration
error, 3 solver divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import GENERATORS, MOONS_NOISE_STD, PRESETS, DatasetFormatError, load_dataset, save_dataset, train_test_split
from .evaluation import INFERENCE_MODES, mean_jc, retention_profile
from .fixedpoint import SolverConfig
from .implicit import LinearSolveConfig
from .multilinear import EstimatorConfig, ScalingConfig
from .setfn import SetFunctionModel
from .train import SolverDivergence, TrainConfig, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
OUTPUT_VERSION = 1

log = logging.getLogger("setlearn")


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    tc = TrainConfig()
    train_cfg = {f.name: getattr(tc, f.name) for f in fields(tc)
                 if f.name not in ("estimator", "solver", "scaling", "linear", "seed")}
    return {
        "seed": 0,
        "out": "runs",
        "data": {"dataset": "gaussian", "preset": "table", "n_samples": 1000, "ground_size": 100,
                 "optimal_size": 10, "noise_std": MOONS_NOISE_STD, "train": None, "test": None},
        "train": train_cfg,
        "estimator": asdict(EstimatorConfig()),
        "solver": asdict(SolverConfig()),
        "scaling": asdict(ScalingConfig("frobenius")),
        "linear": asdict(LinearSolveConfig()),
        "eval": {"mode": "converge", "model": None, "min_jc": None},
        "bench": {"K": [5, 10, 20, 40], "n_samples": 8, "repeats": 1},
    }


def _merge(base: dict, override: dict, where="config"):
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown {where} key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}.{k}")
        else:
            base[k] = v
    return base


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"], seed=cfg["seed"], estimator=EstimatorConfig(**cfg["estimator"]),
                           solver=SolverConfig(**cfg["solver"]), scaling=ScalingConfig(**cfg["scaling"]),
                           linear=LinearSolveConfig(**cfg["linear"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve(args) -> dict:
    cfg = default_config()
    if args.config:
        try:
            with open(args.config) as fh:
                _merge(cfg, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    overrides = {
        ("data", "dataset"): "dataset", ("data", "preset"): "preset", ("data", "n_samples"): "n_samples",
        ("data", "ground_size"): "ground_size", ("data", "optimal_size"): "optimal_size",
        ("data", "noise_std"): "noise_std", ("data", "train"): "train_data", ("data", "test"): "data",
        ("train", "epochs"): "epochs", ("train", "lr"): "lr", ("train", "grad_mode"): "grad_mode",
        ("train", "unroll_k"): "unroll_k", ("train", "batch_size"): "batch_size",
        ("train", "depth"): "depth", ("scaling", "mode"): "scaling", ("estimator", "samples"): "samples",
        ("solver", "method"): "solver", ("linear", "method"): "linear_solver",
        ("eval", "mode"): "mode", ("eval", "model"): "model", ("eval", "min_jc"): "min_jc",
        ("bench", "K"): "K", ("bench", "n_samples"): "bench_samples",
    }
    for (sec, key), attr in overrides.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[sec][key] = val
    for sec in ("data",):
        for key in ("train", "test"):
            p = cfg[sec][key]
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{sec}.{key}: no such file {p}")
    if cfg["eval"]["model"] is not None and not Path(cfg["eval"]["model"]).exists():
        raise ConfigError(f"eval.model: no such file {cfg['eval']['model']}")
    return cfg


def _write_jsonl(path: Path, header: dict, records=()):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": OUTPUT_VERSION, **header}) + "\n")
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _say(args, msg):
    if not args.quiet:
        print(msg)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg) -> int:
    d = cfg["data"]
    if d["dataset"] not in GENERATORS:
        raise ConfigError(f"unknown dataset {d['dataset']!r}; choose from {sorted(GENERATORS)}")
    if d["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {d['preset']!r}; choose from {sorted(PRESETS)}")
    gen = GENERATORS[d["dataset"]]
    kw = {"ground_size": d["ground_size"], "optimal_size": d["optimal_size"], "seed": cfg["seed"]}
    if d["dataset"] == "moons":
        kw["noise_std"] = d["noise_std"]
    try:
        if d["preset"] == "table":
            train_set, test_set = train_test_split(gen(d["n_samples"], **kw), PRESETS["table"]["train_fraction"])
        else:
            p = PRESETS["appendix"]
            train_set, test_set = train_test_split(gen(p["n_train"] + p["n_test"], **kw),
                                                   p["n_train"] / (p["n_train"] + p["n_test"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_set, out / "train.jsonl")
    save_dataset(test_set, out / "test.jsonl")
    _say(args, f"wrote {len(train_set)} train / {len(test_set)} test samples to {out}")
    return EXIT_OK


def _load(path, what):
    if path is None:
        raise ConfigError(f"no {what} dataset given")
    try:
        return load_dataset(path)
    except DatasetFormatError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args, cfg) -> int:
    tc = train_config(cfg)
    dataset = _load(cfg["data"]["train"], "training")
    out = Path(cfg["out"])
    t0 = time.perf_counter()
    try:
        model, hist = train(dataset, tc)
    except SolverDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    h = hist.to_dict()
    records = [{"epoch": i + 1, **{k: v[i] for k, v in h.items()}} for i in range(len(hist.loss))]
    _write_jsonl(out / "history.jsonl", {"kind": "history", "config_hash": config_hash(cfg),
                                         "seed": cfg["seed"], "wall_time": time.perf_counter() - t0},
                 records)
    _say(args, f"model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    tc = train_config(cfg)
    if cfg["eval"]["model"] is None:
        raise ConfigError("no model file given")
    mode = cfg["eval"]["mode"]
    if mode not in INFERENCE_MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    try:
        model = SetFunctionModel.load(cfg["eval"]["model"])
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot load model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    dataset = _load(cfg["data"]["test"], "evaluation")
    t0 = time.perf_counter()
    metrics = mean_jc(model, dataset, mode, tc.solver, estimator_cfg=tc.estimator, scaling=tc.scaling)
    out = Path(cfg["out"])
    _write_jsonl(out / "metrics.jsonl",
                 {"kind": "metrics", "meanJC": metrics.mean_jc, "mode": mode, "n_samples": len(dataset),
                  "config_hash": config_hash(cfg), "seed": cfg["seed"],
                  "wall_time": time.perf_counter() - t0},
                 ({"sample": i, "jc": j} for i, j in enumerate(metrics.per_sample)))
    _say(args, f"mean JC ({mode}): {metrics.mean_jc:.4f}")
    min_jc = cfg["eval"]["min_jc"]
    return EXIT_FAIL if min_jc is not None and metrics.mean_jc < min_jc else EXIT_OK


def cmd_verify(args, cfg) -> int:
    from .verify import report_records, run_checks

    results = run_checks(seed=cfg["seed"])
    out = Path(cfg["out"])
    ok = all(r.passed for r in results)
    _write_jsonl(out / "verify_report.jsonl",
                 {"kind": "verify", "passed": ok, "n_checks": len(results), "config_hash": config_hash(cfg)},
                 report_records(results))
    for r in results:
        _say(args, f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.measured:.3g} (threshold {r.threshold:g})"
             + (f" [{r.detail}]" if r.detail else ""))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench_memory(args, cfg) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import gen_gaussian

    tc = train_config(cfg)
    b = cfg["bench"]
    K = b["K"]
    if isinstance(K, str):
        try:
            K = [int(k) for k in K.split(",") if k.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse K list {b['K']!r}") from None
    d = cfg["data"]
    data = (_load(d["train"], "benchmark") if d["train"] else
            gen_gaussian(b["n_samples"], d["ground_size"], d["optimal_size"], cfg["seed"]))
    samples = data.samples[:b["n_samples"]]
    try:
        prof = retention_profile(samples, tc, K, repeats=b["repeats"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(cfg["out"])
    _write_jsonl(out / "memory_profile.jsonl", {"kind": "memory_profile", "config_hash": config_hash(cfg),
                                                "seed": cfg["seed"], "K": prof.K}, prof.to_records())
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in prof.bytes:
        ax.plot(prof.K, np.array(prof.series(mode)) / 2 ** 20, marker="o", label=mode)
    ax.set_xlabel("fixed-point iterations K")
    ax.set_ylabel("retained MiB")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "memory_profile.png", dpi=120)
    plt.close(fig)
    for mode in prof.bytes:
        _say(args, f"{mode}: " + ", ".join(f"K={k}: {v / 2 ** 20:.2f} MiB" for k, v in zip(prof.K, prof.series(mode))))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "bench-memory": cmd_bench_memory}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="setlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic train/test files")
    p.add_argument("--dataset", choices=sorted(GENERATORS))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n-samples", type=int)
    p.add_argument("--ground-size", type=int)
    p.add_argument("--optimal-size", type=int)
    p.add_argument("--noise-std", type=float)

    p = sub.add_parser("train", parents=[common], help="train a set-function model")
    p.add_argument("--train-data", metavar="PATH")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--grad-mode", choices=["implicit", "unrolled"])
    p.add_argument("--unroll-k", type=int)
    p.add_argument("--scaling", choices=["none", "constant", "frobenius", "nuclear"])
    p.add_argument("--samples", type=int, help="Monte Carlo samples per estimate")
    p.add_argument("--solver", choices=["fpi", "anderson"])
    p.add_argument("--linear-solver", choices=["normal_cg", "gmres"])

    p = sub.add_parser("eval", parents=[common], help="score a model by mean Jaccard")
    p.add_argument("--model", metavar="PATH")
    p.add_argument("--data", metavar="PATH")
    p.add_argument("--mode", choices=list(INFERENCE_MODES))
    p.add_argument("--min-jc", type=float, help="exit 1 when the mean JC is below this")
    p.add_argument("--scaling", choices=["none", "constant", "frobenius", "nuclear"])
    p.add_argument("--samples", type=int)

    sub.add_parser("verify", parents=[common], help="run the numerical self-checks")

    p = sub.add_parser("bench-memory", parents=[common], help="retained memory against K")
    p.add_argument("--K", help="comma-separated iteration counts")
    p.add_argument("--bench-samples", type=int)
    p.add_argument("--train-data", metavar="PATH")
    p.add_argument("--ground-size", type=int)
    p.add_argument("--optimal-size", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args)
        train_config(cfg)
        print(f"config hash {config_hash(cfg)}")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

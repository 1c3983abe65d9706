"""Command-line front end: ``uepmm fig2|fig3|fig4|train|sim``.

Every command writes plot-ready CSV files plus ``manifest.json`` (config
echo, seed, version, duration, outputs) into ``--out``. The manifest is
written even when the command fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from uepmm import __version__, analytics, simrun, training

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("uepmm")


def tool_version() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


# -- presets ----------------------------------------------------------------


def fig3_preset() -> dict:
    return dict(
        name="fig3",
        strategies=["NOW", "EW", "MDS"],
        analytic=["NOW", "MDS"],
        windows={"EW": "class"},
        packet_lag={"NOW": 1, "EW": 1},
        sweep="deadline",
    )


def fig4_preset() -> dict:
    return dict(
        name="fig4",
        strategies=["NOW", "EW", "MDS"],
        analytic=["NOW", "MDS"],
        windows={"EW": "class"},
        sweep="received",
        received=list(range(41)),
    )


def _sim_config(args, preset: dict) -> simrun.ExperimentConfig:
    data = dict(preset)
    data.update(load_config(args.config))
    for key in ("seed", "trials", "threads"):
        v = getattr(args, key)
        if v is not None:
            data[key] = v
    return simrun.ExperimentConfig.from_dict(data)


# -- commands -----------------------------------------------------------------


def cmd_fig2(args, manifest) -> list[Path]:
    cfg = {"gamma": [0.35, 0.35, 0.3], "k": [1, 2, 6], "W": 40}
    cfg.update(load_config(args.config))
    if args.gamma:
        cfg["gamma"] = args.gamma
    if args.k:
        cfg["k"] = args.k
    if args.W is not None:
        cfg["W"] = args.W
    unknown = sorted(set(cfg) - {"gamma", "k", "W"})
    if unknown:
        raise ValueError(f"unknown fig2 config keys: {', '.join(unknown)}")
    gamma = np.asarray(cfg["gamma"], dtype=float)
    k = np.asarray(cfg["k"], dtype=int)
    if gamma.shape != k.shape:
        raise ValueError("gamma and k need the same length")
    if np.any(gamma < 0) or abs(gamma.sum() - 1) > 1e-12:
        raise ValueError("gamma must be a probability vector")
    manifest["config"] = cfg
    path = Path(args.out) / "fig2.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# uepmm now-decoding-probability {simrun.CSV_SCHEMA}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["N"] + [f"P_d{l + 1}" for l in range(len(k))])
        for n in range(int(cfg["W"]) + 1):
            out.writerow([n] + [repr(float(v)) for v in analytics.now_decoding_bound(gamma, k, n)])
    return [path]


def _run_sim(args, manifest, preset) -> list[Path]:
    cfg = _sim_config(args, preset)
    manifest["config"] = cfg.to_dict()
    manifest["seed"] = cfg.seed
    rows = simrun.run_sweep(cfg)
    return [simrun.write_sweep_csv(Path(args.out) / f"{cfg.name}.csv", cfg, rows)]


def cmd_fig3(args, manifest):
    return _run_sim(args, manifest, fig3_preset())


def cmd_fig4(args, manifest):
    return _run_sim(args, manifest, fig4_preset())


def cmd_sim(args, manifest):
    return _run_sim(args, manifest, {})


def cmd_train(args, manifest) -> list[Path]:
    data = load_config(args.config)
    names = set(training.TrainConfig.__dataclass_fields__)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
    cfg = training.TrainConfig(**data)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mnist is not None:
        cfg.mnist_dir = args.mnist
    if args.t_max:
        cfg.t_max = args.t_max
    if args.strategies:
        cfg.strategies = args.strategies
    if args.samples is not None:
        cfg.samples = args.samples
    if args.repeats is not None:
        cfg.repeats = args.repeats
    cfg.strategies = [training.train_strategy(s) for s in cfg.strategies]
    manifest["config"] = dict(vars(cfg))
    manifest["seed"] = cfg.seed
    curves = training.run_training(cfg)
    paths = []
    for (s, t), pts in curves.items():
        name = f"accuracy_{s.lower()}_t{t:g}.csv"
        paths.append(training.write_accuracy_csv(Path(args.out) / name, s, t, pts))
    return paths


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, mc: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="TOML file with config keys")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    p.add_argument("--threads", type=int, help="worker processes for Monte Carlo trials")
    if mc:
        p.add_argument("--trials", type=int, help="Monte Carlo trials per point")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uepmm", description="UEP coded matrix multiplication experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fig2", help="NOW decoding probabilities vs received results")
    _common(p, mc=False)
    p.add_argument("--gamma", type=float, nargs="+", help="window probabilities")
    p.add_argument("--k", type=int, nargs="+", help="sub-products per class")
    p.add_argument("-W", type=int, help="largest number of received results")
    p.set_defaults(func=cmd_fig2)

    p = sub.add_parser("fig3", help="normalized loss vs deadline (NOW, EW, MDS)")
    _common(p)
    p.set_defaults(func=cmd_fig3)

    p = sub.add_parser("fig4", help="normalized loss vs received results (NOW, EW, MDS)")
    _common(p)
    p.set_defaults(func=cmd_fig4)

    p = sub.add_parser("train", help="coded-gradient training accuracy curves")
    _common(p, mc=False)
    p.add_argument("--mnist", metavar="DIR", help="directory with the MNIST IDX files (default: synthetic data)")
    p.add_argument("--t-max", type=float, nargs="+", help="deadlines to train with")
    p.add_argument("--strategies", nargs="+", help="subset of BASELINE NOW EW UNCODED BLOCKREP")
    p.add_argument("--samples", type=int, help="training samples")
    p.add_argument("--repeats", type=int, help="seeds averaged per curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sim", help="generic sweep from a config file")
    _common(p)
    p.set_defaults(func=cmd_sim)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    manifest = {"command": args.command, "argv": list(sys.argv[1:] if argv is None else argv), "version": tool_version()}
    start = time.perf_counter()
    outputs: list[Path] = []
    status = 0
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = args.func(args, manifest)
    except Exception as exc:  # noqa: BLE001  one-line diagnostic for any failure
        print(f"uepmm {args.command}: error: {exc}", file=sys.stderr)
        manifest["error"] = str(exc)
        status = 1
    finally:
        manifest["duration_s"] = round(time.perf_counter() - start, 3)
        manifest["outputs"] = [str(p) for p in outputs]
        if out.is_dir():
            with open(out / "manifest.json", "w") as fh:
                json.dump(manifest, fh, indent=2, default=str)
                fh.write("\n")
    return status


if __name__ == "__main__":
    sys.exit(main())

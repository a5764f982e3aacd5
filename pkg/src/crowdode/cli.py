"""``crowdode`` command line: gen-data, train, simulate, evaluate, preset.

Exit codes: 0 success, 1 invalid config, 2 runtime or numerical failure,
3 I/O failure (missing, unreadable or corrupt input files).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from crowdode.config import RunConfig, config_from_dict, load_config
from crowdode.errors import ConfigError, CrowdError

log = logging.getLogger("crowdode")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration (defaults if omitted)")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seed-override", type=int, help="replace the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for compiled kernels")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate ground-truth trajectories")
    _common(p)
    p.add_argument("--source", choices=("sfm", "orca"), help="overrides data.source")

    p = sub.add_parser("train", help="fit the force field to a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    p = sub.add_parser("simulate", help="roll out a trained model")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-agents", type=int, required=True)
    p.add_argument("--n-runs", type=int, default=1)
    p.add_argument("--t-max", type=float)

    p = sub.add_parser("evaluate", help="Monte Carlo comparison against a reference model")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--reference", choices=("sfm", "orca"), default="sfm")
    p.add_argument("--n-runs", type=int, help="overrides eval.n_runs (e.g. 200)")

    p = sub.add_parser("preset", help="run a bundled experiment and check its thresholds")
    p.add_argument("name", nargs="?", help="preset name; omit to list presets")
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--n-runs", type=int, help="Monte Carlo runs (default: preset value)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed_override is not None:
        if args.seed_override < 0:
            raise ConfigError("must be non-negative", key="--seed-override")
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _set_threads(n: int) -> None:
    if n < 1:
        raise ConfigError("must be >= 1", key="--threads")
    import numba

    numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out(args, cfg: RunConfig) -> Path:
    return args.out if args.out is not None else Path(cfg.output_dir)


def _fmt(x) -> str:
    # report values are null when undefined (e.g. nobody evacuated)
    return "n/a" if x is None else f"{x:.3f}"


def _run(args) -> int:
    from crowdode import pipeline

    if args.command == "preset":
        from crowdode.presets import list_presets, run_preset

        _set_threads(args.threads)
        if not args.name:
            for name, preset in list_presets().items():
                print(f"{name}\t{preset.description}")
            return EXIT_OK
        summary = run_preset(args.name, args.out, n_runs=args.n_runs)
        print(summary.table())
        return EXIT_OK if summary.passed else EXIT_RUNTIME

    cfg = _load(args)
    _set_threads(args.threads)
    out = _out(args, cfg)
    if args.command == "gen-data":
        m = pipeline.gen_data(cfg, out, args.source)
        print(f"wrote {len(m['files'])} trajectories to {out} (digest {m['digest'][:12]})")
    elif args.command == "train":
        if args.epochs is not None:
            d = cfg.to_dict()
            d["train"]["epochs"] = args.epochs
            cfg = config_from_dict(d)
        if not args.data.exists():
            raise FileNotFoundError(f"{args.data}: no such dataset manifest")

        def progress(rec):
            print(f"epoch {rec.epoch:3d}  loss {rec.mean_loss:.6f}  ({rec.wall_time:.1f}s)",
                  flush=True)

        m = pipeline.train_from_manifest(cfg, args.data, out, progress)
        print(f"checkpoint {out / m['checkpoint']} (digest {m['digest'][:12]})")
    elif args.command == "simulate":
        if not args.checkpoint.exists():
            raise FileNotFoundError(f"{args.checkpoint}: no such checkpoint")
        if args.n_agents < 1 or args.n_runs < 1:
            raise ConfigError("must be >= 1", key="--n-agents/--n-runs")
        m = pipeline.simulate(cfg, args.checkpoint, args.n_agents, out, args.n_runs, args.t_max)
        print(f"wrote {len(m['files'])} trajectories to {out} (digest {m['digest'][:12]})")
    elif args.command == "evaluate":
        if not args.checkpoint.exists():
            raise FileNotFoundError(f"{args.checkpoint}: no such checkpoint")
        if args.n_runs is not None and args.n_runs < 1:
            raise ConfigError("must be >= 1", key="--n-runs")
        m = pipeline.evaluate(cfg, args.checkpoint, args.reference, out, args.n_runs)
        report = json.loads((out / m["report"]).read_text())
        c = report["comparison"]
        print(f"ICE max |diff| {_fmt(c['ice_max_abs_diff'])}  "
              f"T_ev W1 {_fmt(c['t_ev_wasserstein1'])}  modes {c['histogram']['modes']}")
        if "short_horizon" in c:
            print(f"short-horizon ADE ratio {_fmt(c['short_horizon']['ratio'])}")
        print(f"report {out / m['report']} (digest {m['digest'][:12]})")
    return EXIT_OK


def main(argv=None) -> int:
    from crowdode.pipeline import ManifestError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CrowdError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

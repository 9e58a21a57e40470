"""Command-line entry point: ``srem generate | train | eval | sweep``.

Exit codes: 0 success, 1 usage or configuration error, 2 training diverged,
3 input/output problem (unreadable or malformed files, refusing to
overwrite an existing output).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, config, experiment
from .dataset import ConfigError, FeatureFormatError, make_splits
from .encoders import CheckpointError
from .trainer import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("srem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _run_config(args) -> config.RunConfig:
    file_values = config.load_file(args.config) if args.config else {}
    overrides = _overrides(args.set)
    for flag, key in (("epochs", "epochs_total"), ("seed", "seed"), ("noise", "noise_ratio"),
                      ("data", "data_dir"), ("out", "out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = config.resolve(file_values, overrides, args.preset)
    ablate = [a for chunk in (args.ablate or []) for a in chunk.split(",") if a]
    if ablate or args.baseline:
        values = config.apply_ablations(cfg.values, ablate, args.baseline)
        cfg = cfg.with_values(**values)
    return cfg


def cmd_generate(args) -> int:
    params = {"n_train": args.n, "n_val": args.n_val, "n_test": args.n_test,
              "noise_ratio": args.noise, "data_seed": args.seed,
              "noise_seed": args.seed if args.noise_seed is None else args.noise_seed,
              "clusters": args.clusters, "image_dim": args.image_dim, "text_dim": args.text_dim,
              "latent_dim": args.latent_dim, "jitter": args.jitter,
              "modality_noise": args.modality_noise}
    splits = make_splits(**params)
    out = experiment.prepare_dir(experiment.output_path(args.out), args.force)
    doc = experiment.write_dataset(out, splits, params)
    noise = doc["noise"]
    print(f"wrote {out}: {doc['sizes']} pairs, {noise['false_flags']} mismatched training pairs"
          + (" (all flags true)" if noise["all_flags_true"] else ""))
    print(f"manifest digest {doc['manifest_digest']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    outcome = experiment.train_run(cfg, force=args.force)
    s = outcome.summary
    print(f"run {outcome.out_dir}: best epoch {s['best_epoch']}, "
          f"val r_sum {s['best_val_r_sum']:.4f}, test r_sum {s['test']['r_sum']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if args.untrained:
        cfg, _ = experiment.load_run(run_dir)
        metrics = experiment.untrained_metrics(cfg, args.split)
        label = "untrained"
    else:
        metrics = experiment.evaluate_run(run_dir, args.checkpoint, args.split)
        label = args.checkpoint
    report = {"run": str(run_dir), "checkpoint": label, "split": args.split, "metrics": metrics}
    for k, v in metrics.items():
        print(f"{k:>8} {v:.4f}")
    out = run_dir / f"eval_{label}_{args.split}.json"
    out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    rows = experiment.run_sweep(cfg, args.out or cfg["out_dir"], _floats(args.ratios),
                                _ints(args.seeds), force=args.force, workers=args.workers)
    for row in rows:
        if row["status"] == "ok":
            print(f"ratio {row['ratio']:g} {row['method']:>8} seed {row['seed']}: "
                  f"test r_sum {row['test_r_sum']:.4f}, final ratio {row['final_noisy_grad_ratio']}")
        else:
            print(f"ratio {row['ratio']:g} {row['method']:>8} seed {row['seed']}: {row['error']}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_DIVERGED


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--preset", choices=sorted(config.PRESETS), help="base values before the file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--ablate", action="append", metavar="NAMES",
                   help="comma-separated: " + ", ".join(sorted(config.ABLATIONS)))
    p.add_argument("--baseline", choices=sorted(config.BASELINES))
    p.add_argument("--epochs", type=int, help="shorthand for --set epochs_total=N")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise", type=float, help="training noise ratio when generating in memory")
    p.add_argument("--data", help="dataset directory written by `generate`")
    p.add_argument("--out", help="output directory (relative to $%s if set)"
                   % experiment.OUTPUT_ROOT_ENV)
    p.add_argument("--force", action="store_true", help="overwrite an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srem", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"srem {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic feature files and a manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000, help="training pairs")
    g.add_argument("--n-val", type=int, default=500)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-seed", type=int)
    g.add_argument("--clusters", type=int, default=20)
    g.add_argument("--image-dim", type=int, default=64)
    g.add_argument("--text-dim", type=int, default=64)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--jitter", type=float, default=1.0)
    g.add_argument("--modality-noise", type=float, default=0.5)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and write a run directory")
    _config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run's checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", choices=("best", "final"), default="best")
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--untrained", action="store_true", help="evaluate a freshly initialised model")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="SREM vs the vanilla baseline over noise ratios")
    _config_args(s)
    s.add_argument("--ratios", default="0.2,0.4,0.6")
    s.add_argument("--seeds", default="0")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("config", help="print the resolved config (or the schema)")
    _config_args(c)
    c.add_argument("--schema", action="store_true")
    c.set_defaults(func=cmd_config)
    return parser


def cmd_config(args) -> int:
    if args.schema:
        print(config.schema_table())
    else:
        print(_run_config(args).snapshot(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FeatureFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, UsageError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

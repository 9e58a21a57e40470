"""Run directories: resolve data, train, evaluate, and write every artifact."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import diagnostics, encoders
from .config import BASELINES, RunConfig, load
from .dataset import (FeatureFormatError, PairDataset, Splits, load_features, make_splits,
                      save_features)
from .diagnostics import EpochMonitor, default_energy_range, jsonl, metrics_csv
from .encoders import EncoderParams
from .trainer import TrainResult, run_training

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SREM_OUTPUT_ROOT"
RUN_FORMAT = "srem-run"
DATA_FORMAT = "srem-data"
FORMAT_VERSION = 1
SPLIT_FILES = {"train": "train.feat", "val": "val.feat", "test": "test.feat"}
RATIO_NOTE = ("noisy_grad_ratio counts, over post-warmup epochs only, samples in both "
              "directions whose ranking hinge is active with a positive weight")


class OutputExistsError(FileExistsError):
    pass


def output_path(path) -> Path:
    """Relative paths are placed under ``$SREM_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def prepare_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- datasets on disk ---------------------------------------------------------------


def data_manifest(splits: Splits, params: dict, files: dict[str, str] | None = None) -> dict:
    train = splits.train
    doc = {
        "format": DATA_FORMAT,
        "version": FORMAT_VERSION,
        "generator": params,
        "sizes": {name: len(getattr(splits, name)) for name in SPLIT_FILES},
        "noise": {
            "ratio": train.noise_ratio,
            "false_flags": int((~train.match_flag).sum()),
            "all_flags_true": bool(train.match_flag.all()),
            "permutation_digest": train.permutation_digest(),
        },
        "digests": {name: getattr(splits, name).digest() for name in SPLIT_FILES},
    }
    if files is not None:
        doc["files"] = files
    body = json.dumps(doc, sort_keys=True)
    doc["manifest_digest"] = hashlib.sha256(body.encode()).hexdigest()
    return doc


def write_dataset(out: Path, splits: Splits, params: dict) -> dict:
    files = {}
    for name, fname in SPLIT_FILES.items():
        save_features(out / fname, getattr(splits, name))
        files[name] = {"path": fname, "sha256": _sha256(out / fname)}
    doc = data_manifest(splits, params, files)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


def read_dataset(data_dir) -> tuple[Splits, dict]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FeatureFormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if doc.get("format") != DATA_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise FeatureFormatError(f"{manifest_path}: unsupported manifest "
                                 f"{doc.get('format')!r} v{doc.get('version')!r}")
    loaded = {}
    for name in SPLIT_FILES:
        entry = doc["files"][name]
        path = data_dir / entry["path"]
        if _sha256(path) != entry["sha256"]:
            raise FeatureFormatError(f"{path}: checksum does not match the manifest")
        loaded[name] = load_features(path)
    return Splits(**loaded), doc


def resolve_data(cfg: RunConfig) -> tuple[Splits, dict]:
    if cfg["data_dir"]:
        splits, doc = read_dataset(cfg["data_dir"])
        return splits, {"source": str(cfg["data_dir"]), "manifest_digest": doc["manifest_digest"],
                        "digests": doc["digests"]}
    splits = make_splits(**cfg.generator())
    return splits, {"source": "generated", "digests": {n: getattr(splits, n).digest()
                                                       for n in SPLIT_FILES}}


# -- training runs --------------------------------------------------------------------


@dataclass
class RunOutcome:
    out_dir: Path
    result: TrainResult
    test_metrics: dict[str, float]
    summary: dict


def evaluate(params: EncoderParams, ds: PairDataset) -> dict[str, float]:
    return diagnostics.retrieval_metrics(
        encoders.similarity_matrix(params, ds.image_feats, ds.text_feats))


def train_run(cfg: RunConfig, out_dir=None, force: bool = False,
              splits: Splits | None = None, data_info: dict | None = None) -> RunOutcome:
    """Train with ``cfg`` and write the run directory; returns the outcome."""
    cfg.validate()
    out = prepare_dir(output_path(out_dir or cfg["out_dir"]), force)
    if splits is None:
        splits, data_info = resolve_data(cfg)
    (out / "config.toml").write_text(cfg.snapshot())

    tc = cfg.train_config()
    monitor = EpochMonitor(splits.train.match_flag, bins=cfg["hist_bins"],
                           energy_range=default_energy_range(tc.logit_scale, tc.batch_size),
                           keep_batches=cfg["keep_batches"])
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir()
    config_hash = cfg.hash()

    with open(out / "metrics.jsonl", "w") as stream:
        def on_epoch(record, params):
            stream.write(jsonl([record.detail()]))
            stream.flush()

        result = run_training(tc, splits.train.features,
                              (splits.val.image_feats, splits.val.text_feats), monitor, on_epoch)

    (out / "metrics.csv").write_text(metrics_csv(result.records))
    if cfg["keep_batches"]:
        (out / "batches.jsonl").write_text(jsonl(monitor.batch_log))
    encoders.save_checkpoint(ckpt_dir / "best.json", result.best_params, config_hash,
                             {"epoch": result.best_epoch, "val_r_sum": result.best_val_r_sum})
    encoders.save_checkpoint(ckpt_dir / "final.json", result.final_params, config_hash,
                             {"epoch": tc.epochs_total})

    test_metrics = evaluate(result.best_params, splits.test)
    summary = {
        "format": RUN_FORMAT,
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "data": data_info,
        "best_epoch": result.best_epoch,
        "best_val_r_sum": result.best_val_r_sum,
        "final_noisy_grad_ratio": result.records[-1].noisy_grad_ratio,
        "test": test_metrics,
        "notes": {"noisy_grad_ratio": RATIO_NOTE},
    }
    (out / "run.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.info("run written to %s (best epoch %d, test r_sum %.4f)", out, result.best_epoch,
             test_metrics["r_sum"])
    return RunOutcome(out, result, test_metrics, summary)


def load_run(run_dir) -> tuple[RunConfig, dict]:
    run_dir = Path(run_dir)
    cfg = load(run_dir / "config.toml")
    summary = json.loads((run_dir / "run.json").read_text())
    return cfg, summary


def evaluate_run(run_dir, checkpoint: str = "best", split: str = "test") -> dict[str, float]:
    """Re-evaluate a stored checkpoint; raises if it does not belong to the run's config."""
    run_dir = Path(run_dir)
    cfg, _ = load_run(run_dir)
    params, _ = encoders.load_checkpoint(run_dir / "checkpoints" / f"{checkpoint}.json",
                                         expected_config_hash=cfg.hash())
    splits, _ = resolve_data(cfg)
    return evaluate(params, getattr(splits, split))


def untrained_metrics(cfg: RunConfig, split: str = "test") -> dict[str, float]:
    splits, _ = resolve_data(cfg)
    tc = cfg.train_config()
    params = encoders.init_params(splits.train.image_feats.shape[1],
                                  splits.train.text_feats.shape[1], tc.embed_dim,
                                  tc.hidden_dim, tc.seed, tc.logit_scale)
    return evaluate(params, getattr(splits, split))


def oracle_metrics(splits: Splits, split: str = "test") -> dict[str, float]:
    """Least-squares linear matcher fitted on the matched training pairs."""
    train = splits.train
    keep = train.match_flag
    ds = getattr(splits, split)
    sim = diagnostics.least_squares_oracle(train.image_feats[keep], train.text_feats[keep],
                                           ds.image_feats, ds.text_feats)
    return diagnostics.retrieval_metrics(sim)


# -- noise sweeps -------------------------------------------------------------------

SWEEP_RATIOS = (0.2, 0.4, 0.6)
SWEEP_COLUMNS = (["ratio", "method", "seed", "status", "error", "dataset_digest", "best_epoch"]
                 + [f"test_{d}_r{k}" for d in ("i2t", "t2i") for k in diagnostics.KS]
                 + ["test_r_sum", "final_noisy_grad_ratio", "noisy_grad_curve"])


def sweep_cell(cfg: RunConfig, ratio: float, method: str, seed: int, out_dir: Path,
               force: bool) -> dict:
    values = dict(cfg.values, noise_ratio=ratio, seed=seed, data_seed=seed, noise_seed=seed)
    if method == "vanilla":
        values.update(BASELINES["vanilla"])
    row = {"ratio": ratio, "method": method, "seed": seed, "status": "ok", "error": ""}
    try:
        cell_cfg = cfg.with_values(**values)
        outcome = train_run(cell_cfg, out_dir / f"ratio={ratio:g}" / method / f"seed={seed}", force)
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.warning("sweep cell ratio=%g method=%s seed=%d failed: %s", ratio, method, seed, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row["dataset_digest"] = outcome.summary["data"]["digests"]["train"][:16]
    row["best_epoch"] = outcome.result.best_epoch
    for k, v in outcome.test_metrics.items():
        row[f"test_{k}"] = v
    curve = [r.noisy_grad_ratio for r in outcome.result.records]
    row["final_noisy_grad_ratio"] = curve[-1]
    row["noisy_grad_curve"] = " ".join("" if c is None else repr(c) for c in curve)
    return row


def run_sweep(cfg: RunConfig, out_dir, ratios=SWEEP_RATIOS, seeds=(0,),
              methods=("srem", "vanilla"), force: bool = False, workers: int = 1) -> list[dict]:
    out = prepare_dir(output_path(out_dir), force)
    jobs = [(r, m, s) for r in ratios for m in methods for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(sweep_cell, cfg, r, m, s, out, force) for r, m, s in jobs]
            rows = [f.result() for f in futures]
    else:
        rows = [sweep_cell(cfg, r, m, s, out, force) for r, m, s in jobs]
    (out / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"# srem-sweep v{FORMAT_VERSION}"])
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([diagnostics._fmt(row.get(c)) for c in SWEEP_COLUMNS])
    return buf.getvalue()

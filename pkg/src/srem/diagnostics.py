"""Retrieval metrics and training diagnostics.

Ground-truth match flags enter here and nowhere else: the trainer hands each
batch's :class:`~srem.losses.LossBreakdown` to an :class:`EpochMonitor`, which
holds the flags.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk

KS = (1, 5, 10)
METRICS_SCHEMA_VERSION = 1
DEFAULT_BINS = 50


def recall_at_k(sim, ground_truth, k: int) -> float:
    """Fraction of queries (rows) whose true item ranks within the top ``k``.

    Ties are broken toward the smaller gallery index.
    """
    sim = np.asarray(sim, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.intp)
    n_query, n_gallery = sim.shape
    if k > n_gallery:
        raise ValueError(f"k={k} exceeds gallery size {n_gallery}")
    target = sim[np.arange(n_query), gt][:, None]
    cols = np.arange(n_gallery)[None, :]
    rank = (sim > target).sum(axis=1) + ((sim == target) & (cols < gt[:, None])).sum(axis=1)
    return float(np.mean(rank < k))


def retrieval_metrics(sim) -> dict[str, float]:
    """R@1/5/10 in both directions plus their sum, for a square pairwise matrix."""
    sim = np.asarray(sim, dtype=np.float64)
    gt = np.arange(sim.shape[0])
    out = {}
    for name, m in (("i2t", sim), ("t2i", sim.T)):
        for k in KS:
            out[f"{name}_r{k}"] = recall_at_k(m, gt, min(k, m.shape[1]))
    out["r_sum"] = sum(out[f"{d}_r{k}"] for d in ("i2t", "t2i") for k in KS)
    return out


# -- per-batch diagnostics --------------------------------------------------------


def positive_gradient_mask(breakdown, direction: str) -> np.ndarray:
    """Samples whose ranking hinge pushes ``S_ii`` up in ``direction``."""
    active = getattr(breakdown, f"active_{direction}")
    weights = breakdown.weights_T if direction == "i2t" else breakdown.weights_I
    return active & (weights > 0)


class NoisyGradientCounter:
    def __init__(self):
        self.active = 0
        self.mismatched = 0

    def observe(self, breakdown, batch_flags: np.ndarray) -> None:
        for d in ("i2t", "t2i"):
            mask = positive_gradient_mask(breakdown, d)
            self.active += int(mask.sum())
            self.mismatched += int((mask & ~batch_flags).sum())

    @property
    def ratio(self) -> float | None:
        return None if self.active == 0 else self.mismatched / self.active


def noisy_gradient_ratio(stream, match_flags) -> float | None:
    """``stream`` yields ``(batch_indices, LossBreakdown)`` pairs for one epoch."""
    flags = np.asarray(match_flags, dtype=bool)
    counter = NoisyGradientCounter()
    for idx, breakdown in stream:
        counter.observe(breakdown, flags[idx])
    return counter.ratio


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def histogram(values, bins: int, value_range: tuple[float, float]) -> Histogram:
    if bins < 10:
        raise ValueError(f"need at least 10 bins, got {bins}")
    lo, hi = value_range
    edges = np.linspace(lo, hi, bins + 1)
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, bins - 1)
    return Histogram(np.bincount(idx, minlength=bins), edges)


def default_energy_range(logit_scale: float, batch_size: int) -> tuple[float, float]:
    return (-logit_scale - np.log(batch_size), 0.0)


def energy_histograms(energies, match_flags, bins: int = DEFAULT_BINS,
                      value_range: tuple[float, float] = (-15.0, 0.0)) -> tuple[Histogram, Histogram]:
    e = np.asarray(energies, dtype=np.float64)
    flags = np.asarray(match_flags, dtype=bool)
    return histogram(e[flags], bins, value_range), histogram(e[~flags], bins, value_range)


def histogram_overlap(a: Histogram, b: Histogram) -> float | None:
    """Intersection mass of the two normalised histograms."""
    if a.total == 0 or b.total == 0:
        return None
    return float(np.minimum(a.counts / a.total, b.counts / b.total).sum())


@dataclass
class FiltrationQuality:
    precision: float | None
    recall: float
    f1: float | None


def filtration_quality(clean_mask, match_flags) -> FiltrationQuality:
    clean = np.asarray(clean_mask, dtype=bool)
    flags = np.asarray(match_flags, dtype=bool)
    hits = int((clean & flags).sum())
    n_clean, n_matched = int(clean.sum()), int(flags.sum())
    recall = hits / n_matched if n_matched else 0.0
    if n_clean == 0:
        return FiltrationQuality(None, recall, None)
    precision = hits / n_clean
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return FiltrationQuality(precision, recall, f1)


# -- epoch records ------------------------------------------------------------------


@dataclass
class ExperimentRecord:
    epoch: int
    phase: str
    lr: float
    r_at: dict[str, float]
    r_sum: float
    noisy_grad_ratio: float | None
    energy_hist_clean: Histogram
    energy_hist_noisy: Histogram
    filtration: FiltrationQuality
    losses: dict[str, float]
    energy_mean_clean: float | None = None
    energy_mean_noisy: float | None = None
    energy_overlap: float | None = None
    n_batches: int = 0

    def row(self) -> dict[str, object]:
        row: dict[str, object] = {"epoch": self.epoch, "phase": self.phase, "lr": self.lr}
        for d in ("i2t", "t2i"):
            for k in KS:
                row[f"{d}_r{k}"] = self.r_at[f"{d}_r{k}"]
        row["r_sum"] = self.r_sum
        row["noisy_grad_ratio"] = self.noisy_grad_ratio
        row["filt_precision"] = self.filtration.precision
        row["filt_recall"] = self.filtration.recall
        row["filt_f1"] = self.filtration.f1
        row["energy_mean_clean"] = self.energy_mean_clean
        row["energy_mean_noisy"] = self.energy_mean_noisy
        row["energy_overlap"] = self.energy_overlap
        for name, value in self.losses.items():
            row[f"loss_{name}"] = value
        return row

    def detail(self) -> dict[str, object]:
        out = self.row()
        out["energy_hist_clean"] = self.energy_hist_clean.counts.tolist()
        out["energy_hist_noisy"] = self.energy_hist_noisy.counts.tolist()
        out["energy_hist_edges"] = self.energy_hist_clean.edges.tolist()
        return out


LOSS_NAMES = ("l_w_i2t", "l_w_t2i", "l_u_I", "l_u_T", "l_c_i2t", "l_c_t2i", "total")
CSV_COLUMNS = (["epoch", "phase", "lr"]
               + [f"{d}_r{k}" for d in ("i2t", "t2i") for k in KS]
               + ["r_sum", "noisy_grad_ratio", "filt_precision", "filt_recall", "filt_f1",
                  "energy_mean_clean", "energy_mean_noisy", "energy_overlap"]
               + [f"loss_{n}" for n in LOSS_NAMES])


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(records: list[ExperimentRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"# srem-metrics v{METRICS_SCHEMA_VERSION}"])
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        row = rec.row()
        writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, default=_jsonable) + "\n" for r in rows)


class EpochMonitor:
    """Collects flag-aware diagnostics from the training stream."""

    def __init__(self, match_flags, bins: int = DEFAULT_BINS,
                 energy_range: tuple[float, float] = (-15.0, 0.0), keep_batches: bool = False):
        self.flags = np.asarray(match_flags, dtype=bool)
        self.bins = bins
        self.energy_range = energy_range
        self.keep_batches = keep_batches
        self.batch_log: list[dict] = []
        self._reset()

    def _reset(self):
        self._counter = NoisyGradientCounter()
        self._energies: list[np.ndarray] = []
        self._flags: list[np.ndarray] = []
        self._clean: list[np.ndarray] = []
        self._per_sample: list[dict] = []

    def observe(self, epoch: int, idx: np.ndarray, breakdown, F: np.ndarray) -> None:
        batch_flags = self.flags[idx]
        self._counter.observe(breakdown, batch_flags)
        self._energies.append(-dk.logsumexp_array(F))
        self._flags.append(batch_flags)
        self._clean.append(breakdown.partitions["i2t"].clean_mask)
        if self.keep_batches:
            entry = {"epoch": epoch, "indices": idx.tolist(), **breakdown.scalars()}
            for d in ("i2t", "t2i"):
                entry[f"positive_{d}"] = positive_gradient_mask(breakdown, d).tolist()
            self.batch_log.append(entry)

    def finish(self) -> dict:
        energies = np.concatenate(self._energies) if self._energies else np.zeros(0)
        flags = np.concatenate(self._flags) if self._flags else np.zeros(0, dtype=bool)
        clean = np.concatenate(self._clean) if self._clean else np.zeros(0, dtype=bool)
        h_clean, h_noisy = energy_histograms(energies, flags, self.bins, self.energy_range)
        out = {
            "noisy_grad_ratio": self._counter.ratio,
            "energy_hist_clean": h_clean,
            "energy_hist_noisy": h_noisy,
            "energy_mean_clean": float(energies[flags].mean()) if flags.any() else None,
            "energy_mean_noisy": float(energies[~flags].mean()) if (~flags).any() else None,
            "energy_overlap": histogram_overlap(h_clean, h_noisy),
            "filtration": filtration_quality(clean, flags),
        }
        self._reset()
        return out


def least_squares_oracle(train_img, train_txt, query_img, gallery_txt) -> np.ndarray:
    """Cosine scores after a linear image-to-text map fitted on matched training pairs."""
    W, *_ = np.linalg.lstsq(np.asarray(train_img), np.asarray(train_txt), rcond=None)
    p = np.asarray(query_img) @ W
    t = np.asarray(gallery_txt, dtype=np.float64)
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    return p @ t.T

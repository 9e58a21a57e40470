"""Flat TOML run configuration.

Every key lives at the top level of the file; the schema below fixes its
type and default. Resolution order: schema defaults, then the named preset,
then the file, then command-line overrides. The snapshot written into a run
directory holds the fully resolved values, so re-reading it reproduces the
run exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import tomli
import tomli_w

from .dataset import ConfigError
from .losses import Components, SremHyper
from .trainer import TrainConfig

CONFIG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    group: str
    help: str = ""


def _k(name, typ, default, group, help=""):
    return Key(name, typ, default, group, help)


_hyper = SremHyper()
_train = TrainConfig()
_comps = Components()

SCHEMA: tuple[Key, ...] = (
    # data
    _k("n_train", int, 2000, "data"),
    _k("n_val", int, 500, "data"),
    _k("n_test", int, 500, "data"),
    _k("clusters", int, 20, "data"),
    _k("image_dim", int, 64, "data"),
    _k("text_dim", int, 64, "data"),
    _k("latent_dim", int, 16, "data"),
    _k("jitter", float, 1.0, "data", "per-pair latent spread around its cluster centre"),
    _k("modality_noise", float, 0.5, "data", "independent noise added to each modality"),
    _k("noise_ratio", float, 0.0, "data", "fraction of training pairs whose texts are shuffled"),
    _k("data_seed", int, 0, "data"),
    _k("noise_seed", int, 0, "data"),
    _k("data_dir", str, "", "data", "directory written by `generate`; empty means generate in memory"),
    # optimisation; hidden_dim 0 means twice embed_dim
    *(_k(f.name, type(getattr(_train, f.name)), getattr(_train, f.name), "train")
      for f in fields(TrainConfig) if f.name not in ("hyper", "components", "hidden_dim")),
    _k("hidden_dim", int, 0, "train"),
    # loss
    *(_k(f.name, type(getattr(_hyper, f.name)), getattr(_hyper, f.name), "hyper")
      for f in fields(SremHyper)),
    # ablation switches
    *(_k(f.name, bool, getattr(_comps, f.name), "components") for f in fields(Components)),
    # output
    _k("out_dir", str, "runs/default", "io"),
    _k("keep_batches", bool, True, "io", "write per-batch diagnostics to batches.jsonl"),
    _k("hist_bins", int, 50, "io"),
    _k("preset", str, "default", "io", "'default' or 'desk'"),
)

KEYS = {k.name: k for k in SCHEMA}

PRESETS: dict[str, dict[str, object]] = {
    "default": {},
    # Calibrated for the synthetic two-tower setting at logit scale 10:
    # margins and threshold sit around the energies this head actually
    # produces, and a shorter schedule at a higher rate converges here.
    "desk": {
        "epochs_total": 20,
        "warmup_epochs": 5,
        "lr": 3e-3,
        "lr_decay_epoch": 10,
        "reset_adam_after_warmup": True,
        "tau": -8.0,
        "m_clean": -10.0,
        "m_noisy": -7.0,
        "lambda1": 0.03,
    },
}

# --ablate names, each a set of switches to turn off (or on)
ABLATIONS: dict[str, dict[str, bool]] = {
    "no-filtration": {"filtration": False},
    "no-sgw": {"sgw": False},
    "no-cmbcl": {"cmbcl": False, "rectification": False},
    "no-rectification": {"rectification": False},
    "no-energy-bound": {"energy_bound": False},
    "no-ranking": {"ranking": False},
    "uniform-complementary": {"uniform_complementary": True},
    "complementary-warmup": {"complementary_warmup": True},
}
ABLATIONS["no-rect"] = ABLATIONS["no-rectification"]

BASELINES = {"vanilla": asdict(Components.baseline())}


def _coerce(key: Key, value, source: str, problems: list[str]):
    if key.type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif key.type is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif key.type is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif key.type is str:
        if isinstance(value, str):
            return value
    problems.append(f"{source}: {key.name} expects {key.type.__name__}, got {value!r}")
    return key.default


@dataclass
class RunConfig:
    values: dict[str, object]

    def __getitem__(self, name: str):
        return self.values[name]

    def group(self, name: str) -> dict[str, object]:
        return {k.name: self.values[k.name] for k in SCHEMA if k.group == name}

    def hyper(self) -> SremHyper:
        return SremHyper(**self.group("hyper"))

    def components(self) -> Components:
        return Components(**self.group("components"))

    def train_config(self) -> TrainConfig:
        kw = self.group("train")
        kw["hidden_dim"] = kw["hidden_dim"] or None
        return TrainConfig(hyper=self.hyper(), components=self.components(), **kw)

    def generator(self) -> dict[str, object]:
        d = self.group("data")
        return {k: d[k] for k in ("n_train", "n_val", "n_test", "noise_ratio", "data_seed",
                                  "noise_seed", "clusters", "image_dim", "text_dim",
                                  "latent_dim", "jitter", "modality_noise")}

    def problems(self) -> list[str]:
        out = []
        v = self.values
        for name in ("n_train", "n_val", "n_test", "clusters", "image_dim", "text_dim",
                     "latent_dim", "embed_dim", "hist_bins"):
            if v[name] < 1:
                out.append(f"{name} must be positive, got {v[name]}")
        if v["hidden_dim"] < 0:
            out.append(f"hidden_dim must be >= 0 (0 = twice embed_dim), got {v['hidden_dim']}")
        if v["hist_bins"] < 10:
            out.append(f"hist_bins must be >= 10, got {v['hist_bins']}")
        if not 0.0 <= v["noise_ratio"] <= 1.0:
            out.append(f"noise_ratio must lie in [0, 1], got {v['noise_ratio']}")
        if v["n_val"] < 10 or v["n_test"] < 10:
            out.append("n_val and n_test must be >= 10 so that R@10 is defined")
        for name in ("jitter", "modality_noise"):
            if v[name] < 0:
                out.append(f"{name} must be non-negative, got {v[name]}")
        if v["clusters"] >= 1 and v["n_train"] + v["n_val"] + v["n_test"] < v["clusters"]:
            out.append("total number of pairs must be at least the number of clusters")
        if v["preset"] not in PRESETS:
            out.append(f"unknown preset {v['preset']!r}; choose from {sorted(PRESETS)}")
        hyper_problems = SremHyper.check(**self.group("hyper"))
        out.extend(hyper_problems)
        kw = self.group("train")
        kw["hidden_dim"] = kw["hidden_dim"] or None
        out.extend(TrainConfig(**kw).problems())
        return out

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def hash(self) -> str:
        """Digest of everything that affects results (output settings excluded)."""
        payload = {k.name: self.values[k.name] for k in SCHEMA if k.group != "io"}
        text = json.dumps(payload, sort_keys=True, default=repr)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def snapshot(self) -> str:
        body = tomli_w.dumps({"schema_version": CONFIG_SCHEMA_VERSION, **self.values})
        return f"# srem run config, resolved; hash {self.hash()}\n" + body

    def with_values(self, **overrides) -> "RunConfig":
        return resolve(base=self.values, overrides=overrides)


def defaults() -> dict[str, object]:
    return {k.name: k.default for k in SCHEMA}


def resolve(file_values: dict | None = None, overrides: dict | None = None,
            preset: str | None = None, base: dict | None = None) -> RunConfig:
    """Merge the layers into a :class:`RunConfig`; every problem is reported at once."""
    problems: list[str] = []
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    file_values.pop("schema_version", None)

    for source, layer in (("config file", file_values), ("override", overrides)):
        for name in layer:
            if name not in KEYS:
                problems.append(f"{source}: unknown key {name!r}")

    values = dict(base) if base is not None else defaults()
    chosen = preset or overrides.get("preset") or file_values.get("preset") or values["preset"]
    if base is None:
        if chosen in PRESETS:
            values.update(PRESETS[chosen])
        values["preset"] = chosen
    for source, layer in (("config file", file_values), ("override", overrides)):
        for name, raw in layer.items():
            if name in KEYS:
                values[name] = _coerce(KEYS[name], raw, source, problems)
    if preset is not None:
        values["preset"] = preset

    cfg = RunConfig(values)
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return cfg


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed TOML: {exc}") from exc
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: the config format is flat; unexpected tables {nested}")
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return doc


def load(path=None, overrides: dict | None = None, preset: str | None = None) -> RunConfig:
    file_values = load_file(path) if path is not None else {}
    return resolve(file_values, overrides, preset)


def apply_ablations(values: dict, names: list[str], baseline: str | None = None) -> dict:
    out = dict(values)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation(s) {unknown}; choose from {sorted(ABLATIONS)}")
    for n in names:
        out.update(ABLATIONS[n])
    if baseline is not None:
        if baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {baseline!r}; choose from {sorted(BASELINES)}")
        out.update(BASELINES[baseline])
    return out


def schema_table() -> str:
    """Markdown table of every key, used by the README and `--help-config`."""
    rows = ["| key | type | default | group |", "|---|---|---|---|"]
    for k in SCHEMA:
        rows.append(f"| `{k.name}` | {k.type.__name__} | `{k.default!r}` | {k.group} |")
    return "\n".join(rows)


def write_snapshot(path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.snapshot())

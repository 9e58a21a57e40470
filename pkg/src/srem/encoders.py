"""Two-tower MLP encoders and the scaled-cosine similarity head."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffkernel as dk
from .diffkernel import ShapeError, Tape, Var

CHECKPOINT_FORMAT = "srem-checkpoint"
CHECKPOINT_VERSION = 1

TOWER_KEYS = ("w1", "b1", "w2", "b2")


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderParams:
    arrays: dict[str, np.ndarray]
    logit_scale: float = 10.0
    learn_scale: bool = False

    def __post_init__(self):
        if not self.logit_scale > 0:
            raise ValueError(f"logit_scale must be positive, got {self.logit_scale}")
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def names(self) -> list[str]:
        names = sorted(self.arrays)
        if self.learn_scale:
            names.append("logit_scale")
        return names

    @property
    def image_dim(self) -> int:
        return self.arrays["img.w1"].shape[0]

    @property
    def text_dim(self) -> int:
        return self.arrays["txt.w1"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.arrays["img.w2"].shape[1]

    def values(self) -> dict[str, np.ndarray]:
        out = dict(self.arrays)
        if self.learn_scale:
            out["logit_scale"] = np.array([[self.logit_scale]])
        return out

    def update(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name == "logit_scale":
                self.logit_scale = float(arr[0, 0])
            else:
                self.arrays[name] = arr

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()},
                             self.logit_scale, self.learn_scale)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(image_dim: int, text_dim: int, embed_dim: int = 32,
                hidden_dim: int | None = None, seed: int = 0,
                logit_scale: float = 10.0, learn_scale: bool = False,
                bias_init: float = 0.01) -> EncoderParams:
    hidden = 2 * embed_dim if hidden_dim is None else hidden_dim
    rng = np.random.default_rng(seed)
    arrays = {}
    for tower, d_in in (("img", image_dim), ("txt", text_dim)):
        arrays[f"{tower}.w1"] = _glorot(rng, d_in, hidden)
        arrays[f"{tower}.b1"] = np.full((1, hidden), bias_init)
        arrays[f"{tower}.w2"] = _glorot(rng, hidden, embed_dim)
        arrays[f"{tower}.b2"] = np.full((1, embed_dim), bias_init)
    return EncoderParams(arrays, logit_scale, learn_scale)


def bind(params: EncoderParams, tape: Tape, trainable: bool = True) -> dict[str, Var]:
    """Register every parameter on ``tape`` (as leaves when ``trainable``)."""
    make = tape.leaf if trainable else tape.const
    return {name: make(value) for name, value in params.values().items()}


def _tower(x: Var, p: dict[str, Var], prefix: str) -> Var:
    h = dk.tanh(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return dk.l2_normalize_rows(h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])


def encode(bound: dict[str, Var], image_feats, text_feats) -> tuple[Var, Var]:
    """Unit-norm image and text embeddings for one batch."""
    tape = bound["img.w1"].tape
    img = image_feats if isinstance(image_feats, Var) else tape.const(image_feats)
    txt = text_feats if isinstance(text_feats, Var) else tape.const(text_feats)
    if img.shape[0] != txt.shape[0]:
        raise ShapeError(f"batch sizes differ: images {img.shape}, texts {txt.shape}")
    for name, x in (("img", img), ("txt", txt)):
        expected = bound[f"{name}.w1"].shape[0]
        if x.shape[1] != expected:
            raise ShapeError(f"{name} features have {x.shape[1]} columns, encoder expects {expected}")
    return _tower(img, bound, "img"), _tower(txt, bound, "txt")


@dataclass
class BatchLogits:
    """Similarity logits ``F`` (rows: images, columns: texts) and scores ``S``."""

    F: Var
    S: Var
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.arange(self.F.shape[0])

    @property
    def size(self) -> int:
        return self.F.shape[0]

    def oriented(self, direction: str) -> tuple[Var, Var]:
        """``(F, S)`` for i2t, their transposes for t2i."""
        if direction == "i2t":
            return self.F, self.S
        if direction == "t2i":
            return self.F.T, self.S.T
        raise ValueError(f"unknown direction {direction!r}")


def similarity_logits(img_emb: Var, txt_emb: Var, logit_scale) -> BatchLogits:
    if img_emb.shape[1] != txt_emb.shape[1]:
        raise ShapeError(f"embedding dims differ: {img_emb.shape} vs {txt_emb.shape}")
    F = dk.mul(img_emb @ txt_emb.T, logit_scale)
    return BatchLogits(F, dk.sigmoid(F))


def forward(params: EncoderParams, image_feats, text_feats,
            tape: Tape | None = None, trainable: bool = False):
    """Encode a batch and return ``(BatchLogits, bound params)``."""
    tape = Tape() if tape is None else tape
    bound = bind(params, tape, trainable)
    img, txt = encode(bound, image_feats, text_feats)
    scale = bound["logit_scale"] if params.learn_scale else params.logit_scale
    return similarity_logits(img, txt, scale), bound


def embed(params: EncoderParams, image_feats, text_feats) -> tuple[np.ndarray, np.ndarray]:
    tape = Tape()
    img, txt = encode(bind(params, tape, trainable=False), image_feats, text_feats)
    return img.value, txt.value


def similarity_matrix(params: EncoderParams, image_feats, text_feats) -> np.ndarray:
    img, txt = embed(params, image_feats, text_feats)
    return params.logit_scale * (img @ txt.T)


# -- checkpoints ----------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "dtype": "float64-le",
            "data": base64.b64encode(data).decode("ascii")}


def _decode_array(name: str, entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        raw = base64.b64decode(entry["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"array {name!r} is malformed: {exc}") from exc
    if entry.get("dtype") != "float64-le":
        raise CheckpointError(f"array {name!r} has unsupported dtype {entry.get('dtype')!r}")
    expected = 8 * int(np.prod(shape))
    if len(raw) != expected:
        raise CheckpointError(f"array {name!r}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def params_digest(params: EncoderParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes())
    h.update(np.float64(params.logit_scale).tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: EncoderParams, config_hash: str = "", extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "logit_scale": params.logit_scale.hex(),
        "learn_scale": params.learn_scale,
        "arrays": {name: _encode_array(params.arrays[name]) for name in sorted(params.arrays)},
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path, expected_config_hash: str | None = None) -> tuple[EncoderParams, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unexpected format tag {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')!r}")
    if expected_config_hash is not None and doc.get("config_hash") != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {doc.get('config_hash')!r} does not match {expected_config_hash!r}")
    arrays = {name: _decode_array(name, entry) for name, entry in doc["arrays"].items()}
    params = EncoderParams(arrays, float.fromhex(doc["logit_scale"]), bool(doc["learn_scale"]))
    return params, doc

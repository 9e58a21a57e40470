"""Energy filtration, swapped gradient weighting and biased complementary losses.

Every function works on one retrieval direction. ``"i2t"`` reads rows of the
logit matrix (images querying texts); ``"t2i"`` reads rows of its transpose.
Matrix arguments may be :class:`~srem.diffkernel.Var` objects (the path that
carries gradients) or plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import diffkernel as dk
from .diffkernel import ShapeError, Tape, Var
from .encoders import BatchLogits

DIRECTIONS = ("i2t", "t2i")
RECT_EPS = 1e-6


class DegenerateBatchError(ValueError):
    pass


def _values(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _orient_values(x, direction: str) -> np.ndarray:
    v = _values(x)
    if direction == "i2t":
        return v
    if direction == "t2i":
        return v.T
    raise ValueError(f"unknown direction {direction!r}")


def _orient_var(x, direction: str) -> Var:
    if not isinstance(x, Var):
        x = Tape().const(x)
    if direction == "i2t":
        return x
    if direction == "t2i":
        return x.T
    raise ValueError(f"unknown direction {direction!r}")


@dataclass(frozen=True)
class SremHyper:
    tau: float = -2.0
    m_clean: float = -4.0
    m_noisy: float = 0.0
    alpha: float = 0.2
    beta: float = 2.0
    b: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 0.5
    # "weighted": selection-weighted expectation of -log(1 - P_ij);
    # "transpose": -log(1 - S') with S' = softmax(P_bar)^T S.
    cmbcl_mode: str = "weighted"
    # scores fed to the complementary loss: "softmax" rows of F or "sigmoid" S
    cmbcl_scores: str = "softmax"
    # "mean" averages over the B-1 complementary labels of a row, "sum" adds
    # them, which puts L_c on the scale of an ordinary per-sample loss
    cmbcl_reduce: str = "sum"

    def problems(self) -> list[str]:
        out = []
        if not self.m_clean < self.m_noisy:
            out.append(f"m_clean ({self.m_clean}) must be below m_noisy ({self.m_noisy})")
        if not 0 < self.alpha < 1:
            out.append(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.beta < 0:
            out.append(f"beta must be non-negative, got {self.beta}")
        for name in ("lambda1", "lambda2"):
            if not 0 <= getattr(self, name) <= 1:
                out.append(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.cmbcl_mode not in ("weighted", "transpose"):
            out.append(f"cmbcl_mode must be 'weighted' or 'transpose', got {self.cmbcl_mode!r}")
        if self.cmbcl_scores not in ("softmax", "sigmoid"):
            out.append(f"cmbcl_scores must be 'softmax' or 'sigmoid', got {self.cmbcl_scores!r}")
        if self.cmbcl_reduce not in ("mean", "sum"):
            out.append(f"cmbcl_reduce must be 'mean' or 'sum', got {self.cmbcl_reduce!r}")
        return out

    @classmethod
    def check(cls, **values) -> list[str]:
        """Problems with ``values`` without raising."""
        probe = object.__new__(cls)
        for f in fields(cls):
            object.__setattr__(probe, f.name, values.get(f.name, f.default))
        return probe.problems()

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class Components:
    """Ablation switches; the default enables everything."""

    filtration: bool = True
    sgw: bool = True
    cmbcl: bool = True
    rectification: bool = True
    # the energy-bounded loss; only meaningful together with filtration
    energy_bound: bool = True
    # the (weighted) ranking hinge; off isolates the complementary loss
    ranking: bool = True
    # with CMBCL off, warm up on the complementary loss anyway instead of
    # falling back to the plain hinge
    complementary_warmup: bool = False
    uniform_complementary: bool = False
    vanilla: bool = False

    @classmethod
    def baseline(cls) -> "Components":
        return cls(filtration=False, sgw=False, cmbcl=False, rectification=False,
                   energy_bound=False, vanilla=True)

    @classmethod
    def complementary_only(cls) -> "Components":
        return cls(filtration=False, sgw=False, energy_bound=False, ranking=False)


@dataclass
class PairPartition:
    clean: np.ndarray
    noisy: np.ndarray
    direction: str
    size: int

    @classmethod
    def everything(cls, size: int, direction: str, clean: bool = True) -> "PairPartition":
        idx = np.arange(size)
        empty = np.zeros(0, dtype=np.intp)
        return cls(idx if clean else empty, empty if clean else idx, direction, size)

    @property
    def clean_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[self.clean] = True
        return mask


# -- energy-guided filtration ---------------------------------------------------


def energy(F, i: int, direction: str = "i2t") -> float:
    row = _orient_values(F, direction)[i]
    return -dk.logsumexp_row(row)


def energies(F, direction: str = "i2t") -> Var:
    """Per-sample energies as a differentiable (B, 1) column."""
    return -dk.logsumexp_rows(_orient_var(F, direction))


def partition(F, tau: float, direction: str = "i2t") -> PairPartition:
    f = _orient_values(F, direction)
    e = -dk.logsumexp_array(f)
    on_diag = np.diagonal(f) >= f.max(axis=1)
    clean = (e < tau) & on_diag
    return PairPartition(np.flatnonzero(clean), np.flatnonzero(~clean), direction, f.shape[0])


def energy_bounded_loss(F, part: PairPartition, m_clean: float, m_noisy: float,
                        direction: str = "i2t") -> Var:
    e = energies(F, direction)
    loss = e.tape.const(0.0)
    if len(part.clean):
        loss = loss + dk.mean(dk.square(dk.relu(dk.take_rows(e, part.clean) - m_clean)))
    if len(part.noisy):
        loss = loss + dk.mean(dk.square(dk.relu(m_noisy - dk.take_rows(e, part.noisy))))
    return loss


# -- swapped gradient weighting -------------------------------------------------


def normalized_entropies(F, direction: str = "i2t") -> np.ndarray:
    f = _orient_values(F, direction)
    B = f.shape[1]
    if B < 2:
        raise DegenerateBatchError("normalized entropy needs at least 2 candidates")
    p = dk.softmax_array(f)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    # rounding can push a uniform row a hair past 1
    return np.clip(-plogp.sum(axis=1) / np.log(B), 0.0, 1.0)


def normalized_entropy(F, i: int, direction: str = "i2t") -> float:
    return float(normalized_entropies(F, direction)[i])


def hard_negatives(F, direction: str = "i2t") -> np.ndarray:
    f = _orient_values(F, direction)
    if f.shape[1] < 2:
        raise DegenerateBatchError("hard negatives need at least 2 candidates")
    masked = f.copy()
    np.fill_diagonal(masked, -np.inf)
    return np.argmax(masked, axis=1)


def hard_negative(F, i: int, direction: str = "i2t") -> int:
    return int(hard_negatives(F, direction)[i])


def _hinge_margins(F, S, alpha: float, direction: str) -> tuple[np.ndarray, np.ndarray]:
    s = _orient_values(S, direction)
    phi = hard_negatives(F, direction)
    rows = np.arange(s.shape[0])
    return alpha - s[rows, rows] + s[rows, phi], phi


def sensitivity_weights(F, S, alpha: float, direction: str = "i2t") -> np.ndarray:
    """Detached per-sample weights ``1 - e(P_i) * [hinge active]``."""
    margin, _ = _hinge_margins(F, S, alpha, direction)
    return 1.0 - normalized_entropies(F, direction) * (margin > 0)


def sensitivity_weight(F, S, i: int, alpha: float, direction: str = "i2t") -> float:
    return float(sensitivity_weights(F, S, alpha, direction)[i])


def ranking_terms(F, S, part: PairPartition, weights, alpha: float,
                  direction: str = "i2t") -> tuple[Var, np.ndarray]:
    """Per-sample hinge terms over the clean set and a length-B active mask."""
    s = _orient_var(S, direction)
    B = s.shape[0]
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != (B,):
        raise ShapeError(f"expected {B} weights, got shape {w.shape}")
    phi = hard_negatives(F, direction)
    clean = part.clean
    pos = dk.take_rows(dk.diag(s), clean)
    neg = dk.take_rows(dk.gather(s, phi), clean)
    terms = dk.relu(alpha - dk.mul(pos, w[clean].reshape(-1, 1)) + neg)
    active = np.zeros(B, dtype=bool)
    active[clean] = terms.value[:, 0] > 0
    return terms, active


def sgw_ranking_loss(F, S, part: PairPartition, weights_swapped, alpha: float,
                     direction: str = "i2t") -> Var:
    terms, _ = ranking_terms(F, S, part, weights_swapped, alpha, direction)
    if terms.shape[0] == 0:
        return terms.tape.const(0.0)
    return dk.mean(terms)


def vanilla_hinge_loss(F, S, alpha: float, direction: str = "i2t") -> Var:
    B = _values(S).shape[0]
    return sgw_ranking_loss(F, S, PairPartition.everything(B, direction), np.ones(B), alpha, direction)


# -- cross-modal biased complementary learning ---------------------------------


@dataclass
class Selection:
    """Complementary-label selection logits; masked entries are -inf."""

    values: np.ndarray
    mask: np.ndarray

    @property
    def full_rows(self) -> np.ndarray:
        return self.mask.all(axis=1)


def complementary_selection(S, part: PairPartition | None, beta: float, b: float,
                            direction: str = "i2t", hard_neg: np.ndarray | None = None) -> Selection:
    s = _orient_values(S, direction)
    B = s.shape[0]
    mask = np.eye(B, dtype=bool)
    expo = np.exp(beta * (s - b))
    expo[mask] = 0.0
    values = expo / (1.0 + expo.sum(axis=1, keepdims=True))
    if part is not None and len(part.clean):
        phi = hard_negatives(s) if hard_neg is None else np.asarray(hard_neg)
        mask[part.clean, phi[part.clean]] = True
    values = np.where(mask, -np.inf, values)
    return Selection(values, mask)


def transition(sel: Selection) -> np.ndarray:
    """Row softmax of the selection logits; fully masked rows become zeros."""
    Q = np.zeros_like(sel.values)
    live = ~sel.full_rows
    if np.any(live):
        Q[live] = dk.softmax_array(sel.values[live], sel.mask[live])
    return Q


def rectify(S, sel: Selection, direction: str = "i2t", eps: float = RECT_EPS) -> Var:
    """``clamp(Q^T S, eps, 1 - eps)`` with ``Q`` held constant."""
    s = _orient_var(S, direction)
    Q = transition(sel)
    return dk.clamp(s.tape.const(Q.T) @ s, eps, 1.0 - eps)


def cmbcl_loss(S_rect) -> Var:
    """Uniform expectation of ``-log(1 - S'_ij)`` over the off-diagonal entries."""
    s = S_rect if isinstance(S_rect, Var) else Tape().const(S_rect)
    B = s.shape[0]
    if B < 2:
        raise DegenerateBatchError("complementary loss needs at least 2 samples")
    weights = (1.0 - np.eye(B)) / (B * (B - 1))
    return -dk.total(dk.mul(dk.log(1.0 - s), weights))


def weighted_complementary_loss(P, Q: np.ndarray, eps: float = RECT_EPS) -> Var:
    """``-(1/B) sum_ij Q_ij log(1 - P_ij)`` with ``Q`` held constant."""
    p = P if isinstance(P, Var) else Tape().const(P)
    B = p.shape[0]
    return -dk.total(dk.mul(dk.log(1.0 - dk.clamp(p, 0.0, 1.0 - eps)), Q / B))


def uniform_transition(B: int) -> np.ndarray:
    return (1.0 - np.eye(B)) / (B - 1)


def complementary_objective(logits: BatchLogits, part: PairPartition | None,
                            hyper: SremHyper, direction: str,
                            components: Components = Components()) -> Var:
    loss = _complementary_mean(logits, part, hyper, direction, components)
    if hyper.cmbcl_reduce == "sum":
        return dk.mul(loss, float(logits.size - 1))
    return loss


def _complementary_mean(logits, part, hyper, direction, components) -> Var:
    F, S = logits.oriented(direction)
    B = F.shape[0]
    beta = 0.0 if components.uniform_complementary else hyper.beta
    if hyper.cmbcl_scores == "softmax":
        scores = dk.softmax_rows(F)
    else:
        scores = S
    if not components.rectification:
        return weighted_complementary_loss(scores, uniform_transition(B))
    phi = hard_negatives(F.value)
    sel = complementary_selection(S.value, part, beta, hyper.b, "i2t", hard_neg=phi)
    if hyper.cmbcl_mode == "transpose":
        return cmbcl_loss(rectify(scores, sel))
    return weighted_complementary_loss(scores, transition(sel))


# -- combined objective ---------------------------------------------------------


@dataclass
class LossBreakdown:
    l_w_i2t: float = 0.0
    l_w_t2i: float = 0.0
    l_u_I: float = 0.0
    l_u_T: float = 0.0
    l_c_i2t: float = 0.0
    l_c_t2i: float = 0.0
    total: float = 0.0
    weights_I: np.ndarray | None = None
    weights_T: np.ndarray | None = None
    active_i2t: np.ndarray | None = None
    active_t2i: np.ndarray | None = None
    partitions: dict[str, PairPartition] = field(default_factory=dict)
    objective: Var | None = field(default=None, repr=False)

    SCALAR_FIELDS = ("l_w_i2t", "l_w_t2i", "l_u_I", "l_u_T", "l_c_i2t", "l_c_t2i", "total")

    def scalars(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.SCALAR_FIELDS}


def total_objective(logits: BatchLogits, hyper: SremHyper, phase: str = "train",
                    components: Components = Components()) -> LossBreakdown:
    if phase not in ("warmup", "train"):
        raise ValueError(f"phase must be 'warmup' or 'train', got {phase!r}")
    B = logits.size
    if B < 2:
        raise DegenerateBatchError("a batch needs at least 2 pairs")
    tape = logits.F.tape
    F_val, S_val = logits.F.value, logits.S.value
    out = LossBreakdown()
    zero = tape.const(0.0)

    hinge_warmup = phase == "warmup" and not (components.cmbcl or components.complementary_warmup)
    if components.vanilla or hinge_warmup:
        ones = np.ones(B)
        losses = {}
        for d in DIRECTIONS:
            part = PairPartition.everything(B, d)
            terms, active = ranking_terms(F_val, logits.S, part, ones, hyper.alpha, d)
            losses[d] = dk.mean(terms)
            out.partitions[d] = part
            setattr(out, f"active_{d}", active)
        out.weights_I = out.weights_T = ones
        out.l_w_i2t, out.l_w_t2i = losses["i2t"].item(), losses["t2i"].item()
        objective = 0.5 * (losses["i2t"] + losses["t2i"])
    elif phase == "warmup":
        warm = components if components.cmbcl else Components()
        lc = {}
        for d in DIRECTIONS:
            part = PairPartition.everything(B, d, clean=False)
            out.partitions[d] = part
            lc[d] = complementary_objective(logits, part, hyper, d, warm)
            setattr(out, f"active_{d}", np.zeros(B, dtype=bool))
        out.l_c_i2t, out.l_c_t2i = lc["i2t"].item(), lc["t2i"].item()
        objective = lc["i2t"] + lc["t2i"]
    else:
        parts = {}
        for d in DIRECTIONS:
            if components.filtration:
                parts[d] = partition(F_val, hyper.tau, d)
            else:
                parts[d] = PairPartition.everything(B, d)
        out.partitions = parts
        if components.sgw:
            out.weights_I = sensitivity_weights(F_val, S_val, hyper.alpha, "i2t")
            out.weights_T = sensitivity_weights(F_val, S_val, hyper.alpha, "t2i")
        else:
            out.weights_I = out.weights_T = np.ones(B)
        swapped = {"i2t": out.weights_T, "t2i": out.weights_I}

        lw, lu, lc = {}, {}, {}
        for d in DIRECTIONS:
            if components.ranking:
                terms, active = ranking_terms(F_val, logits.S, parts[d], swapped[d], hyper.alpha, d)
                lw[d] = dk.mean(terms) if terms.shape[0] else zero
            else:
                lw[d], active = zero, np.zeros(B, dtype=bool)
            setattr(out, f"active_{d}", active)
            if components.filtration and components.energy_bound:
                lu[d] = energy_bounded_loss(logits.F, parts[d], hyper.m_clean, hyper.m_noisy, d)
            else:
                lu[d] = zero
            lc[d] = complementary_objective(logits, parts[d], hyper, d, components) \
                if components.cmbcl else zero
        out.l_w_i2t, out.l_w_t2i = lw["i2t"].item(), lw["t2i"].item()
        out.l_u_I, out.l_u_T = lu["i2t"].item(), lu["t2i"].item()
        out.l_c_i2t, out.l_c_t2i = lc["i2t"].item(), lc["t2i"].item()
        objective = (0.5 * (lw["i2t"] + lw["t2i"])
                     + hyper.lambda1 * (lu["i2t"] + lu["t2i"])
                     + hyper.lambda2 * (lc["i2t"] + lc["t2i"]))

    if out.weights_I is None:
        out.weights_I = sensitivity_weights(F_val, S_val, hyper.alpha, "i2t")
        out.weights_T = sensitivity_weights(F_val, S_val, hyper.alpha, "t2i")
    out.objective = objective
    out.total = objective.item()
    return out

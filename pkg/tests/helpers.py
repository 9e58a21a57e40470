"""Shared builders for the test suite."""

import numpy as np

from srem import diffkernel as dk
from srem.diffkernel import Tape
from srem.encoders import BatchLogits


def logits_from(F, tape=None) -> BatchLogits:
    """BatchLogits with ``F`` as a leaf and ``S = sigmoid(F)``."""
    tape = Tape() if tape is None else tape
    f = tape.leaf(np.asarray(F, dtype=np.float64))
    return BatchLogits(f, dk.sigmoid(f))


def random_logits(rng, B, scale=10.0, diag_boost=0.0):
    """Scaled cosine logits of random unit vectors, optionally favouring the diagonal."""
    a = rng.standard_normal((B, 4))
    b = a * diag_boost + rng.standard_normal((B, 4))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return scale * a @ b.T


# acceptance results, printed together by the terminal-summary hook in conftest
ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line

"""Checkpoint merging: linear / TIES under SMA or EMA weighting.

All arithmetic runs in float64 and results are rounded to float32 once at
the end. Every weighted sum over checkpoints is accumulated per entry in
ascending order of its terms, so a merge is bit-reproducible and does not
depend on the order in which equally weighted checkpoints are supplied.
Linear merging is computed as ``sum(w * d) / sum(w)`` with the same helpers
TIES uses, which makes the two agree bitwise when TIES keeps everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, CheckpointBuffer, CheckpointError, require_compatible

METHODS = ("linear", "ties")
WEIGHTINGS = ("sma", "ema")
EMA_MODES = ("recursive", "closed_form")


@dataclass(frozen=True)
class MergeConfig:
    method: str = "ties"
    density_k: float = 0.8
    weighting: str = "sma"
    alpha: float = 0.5
    ema_mode: str = "closed_form"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.ema_mode not in EMA_MODES:
            raise ValueError(f"ema_mode must be one of {EMA_MODES}, got {self.ema_mode!r}")
        if not 0.0 < self.density_k <= 1.0:
            raise ValueError(f"density_k must lie in (0, 1], got {self.density_k}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def compute_weights(n: int, config: MergeConfig) -> list[float]:
    """Per-checkpoint weights for a history of ``n`` checkpoints, oldest first.

    EMA treats the first history entry as the base case of the recursion, so
    it keeps the ``(1 - alpha) ** (n - 1)`` mass that is never handed to a
    newer checkpoint.
    """
    if n < 1:
        raise ValueError("cannot weight an empty history")
    if config.weighting == "sma":
        w = [1.0 / n] * n
    elif config.ema_mode == "recursive":
        a = config.alpha
        w = [1.0]
        for _ in range(n - 1):
            w = [(1.0 - a) * x for x in w] + [a]
    else:
        a = config.alpha
        w = [(1.0 - a) ** (n - 1)] + [a * (1.0 - a) ** (n - i) for i in range(2, n + 1)]
    total = math.fsum(w)
    return [x / total for x in w]


# --- float64 working representation -------------------------------------------

def _flat64(ckpt: Checkpoint) -> np.ndarray:
    if not ckpt.params:
        return np.zeros(0)
    return np.concatenate([v.astype(np.float64).ravel() for v in ckpt.params.values()])


def _unflatten(flat: np.ndarray, like: Checkpoint, step_id: int, tag: str) -> Checkpoint:
    out, pos = {}, 0
    for name, arr in like.params.items():
        out[name] = flat[pos : pos + arr.size].reshape(arr.shape).astype(np.float32)
        pos += arr.size
    return Checkpoint(out, step_id=step_id, tag=tag)


def trim_flat(delta: np.ndarray, density_k: float) -> np.ndarray:
    """Keep the ``ceil(k * n)`` largest-magnitude entries; ties keep earlier entries."""
    if not 0.0 < density_k <= 1.0:
        raise ValueError(f"density_k must lie in (0, 1], got {density_k}")
    n = delta.size
    # guard against 0.7 * 10 == 7.000000000000001
    keep = min(n, math.ceil(density_k * n - 1e-9))
    if keep >= n:
        return delta.copy()
    order = np.argsort(-np.abs(delta), kind="stable")
    out = np.zeros_like(delta)
    kept = order[:keep]
    out[kept] = delta[kept]
    return out


def trim(delta: Checkpoint, density_k: float) -> Checkpoint:
    """Global top-k magnitude trim across all tensors of one delta."""
    flat = trim_flat(_flat64(delta), density_k)
    return _unflatten(flat, delta, delta.step_id, delta.tag)


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    """Sum a ``(n, N)`` stack over axis 0, smallest term first per entry."""
    terms = np.sort(terms, axis=0)
    acc = np.zeros(terms.shape[1])
    for row in terms:
        acc += row
    return acc


def elect_signs_flat(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    stack = np.stack(deltas)
    w = np.asarray(weights, dtype=np.float64)[:, None]
    pos = _ordered_sum(w * np.maximum(stack, 0.0))
    neg = _ordered_sum(w * np.maximum(-stack, 0.0))
    return np.sign(pos - neg)


def elect_signs(deltas: Sequence[Checkpoint], weights: Sequence[float]) -> dict[str, np.ndarray]:
    """Weighted sign vote per entry; an exact tie (including all-zero) elects 0."""
    if not deltas:
        raise ValueError("need at least one delta")
    for d in deltas[1:]:
        require_compatible(deltas[0], d)
    signs = elect_signs_flat([_flat64(d) for d in deltas], weights)
    out, pos = {}, 0
    for name, arr in deltas[0].params.items():
        out[name] = signs[pos : pos + arr.size].reshape(arr.shape).astype(np.int8)
        pos += arr.size
    return out


def selective_average_flat(
    deltas: Sequence[np.ndarray], weights: Sequence[float], signs: np.ndarray
) -> np.ndarray:
    stack = np.stack(deltas)
    w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], stack.shape)
    match = (np.sign(stack) == signs) & (signs != 0)
    num = _ordered_sum(np.where(match, w * stack, 0.0))
    den = _ordered_sum(np.where(match, w, 0.0))
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def selective_average(
    deltas: Sequence[Checkpoint], weights: Sequence[float], signs: dict[str, np.ndarray]
) -> Checkpoint:
    flat_signs = np.concatenate([signs[k].astype(np.float64).ravel() for k in deltas[0].params])
    flat = selective_average_flat([_flat64(d) for d in deltas], weights, flat_signs)
    return _unflatten(flat, deltas[0], max(d.step_id for d in deltas), "merged")


def merge(buffer: CheckpointBuffer, config: MergeConfig) -> Checkpoint:
    """Merge the buffer history into one checkpoint anchored at ``buffer.base``."""
    history = buffer.history
    if not history:
        raise CheckpointError("cannot merge an empty checkpoint buffer")
    base = buffer.base
    for c in history:
        require_compatible(base, c)
    step_id = max(c.step_id for c in history)
    weights = compute_weights(len(history), config)
    base64 = _flat64(base)

    if config.method == "linear" and config.weighting == "ema" and config.ema_mode == "recursive":
        # literal recursion over full parameter vectors
        a = config.alpha
        merged = _flat64(history[0])
        for c in history[1:]:
            merged = a * _flat64(c) + (1.0 - a) * merged
        return _unflatten(merged, base, step_id, "merged")

    deltas = [_flat64(c) - base64 for c in history]
    if config.method == "linear":
        stack = np.stack(deltas)
        w = np.broadcast_to(np.asarray(weights)[:, None], stack.shape)
        acc = _ordered_sum(w * stack) / _ordered_sum(w)
    else:
        trimmed = [trim_flat(d, config.density_k) for d in deltas]
        signs = elect_signs_flat(trimmed, weights)
        acc = selective_average_flat(trimmed, weights, signs)
    return _unflatten(base64 + acc, base, step_id, "merged")

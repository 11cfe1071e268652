"""Logit transforms for sampling and the next-token training objective.

The sampling pipeline runs in a fixed order:
temperature -> repetition penalty -> softmax -> top-k -> top-p -> draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.1
    top_k: int = 500
    top_p: float = 0.95
    repetition_penalty: float = 1.1

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return np.asarray(logits, dtype=np.float64) / temperature


def apply_repetition_penalty(logits: np.ndarray, history: Iterable[int], penalty: float) -> np.ndarray:
    """Shrink already-generated tokens: positive logits / penalty, others * penalty."""
    if penalty < 1:
        raise ValueError("penalty must be >= 1")
    out = np.array(logits, dtype=np.float64)
    idx = np.fromiter(set(history), dtype=np.int64)
    if idx.size:
        seen = out[idx]
        out[idx] = np.where(seen > 0, seen / penalty, seen * penalty)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))


def filter_top_k_top_p(probs: np.ndarray, k: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Restrict to the top-k tokens, then to the shortest prefix holding mass >= p.

    Ties in probability are ordered by ascending token id. Returns the
    renormalized distribution and the boolean support mask.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    probs = np.asarray(probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    order = np.lexsort((np.arange(probs.size), -probs))[:k]
    cum = np.cumsum(probs[order])
    # mass is compared with a little slack so p=1 never trims a tail through rounding
    n_keep = min(int(np.searchsorted(cum, p - 1e-12, side="left")) + 1, len(order))
    mask = np.zeros(probs.size, dtype=bool)
    mask[order[:n_keep]] = True
    out = np.where(mask, probs, 0.0)
    return out / out.sum(), mask


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a distribution over token ids."""
    cdf = np.cumsum(probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(probs) - 1)
    while probs[i] == 0:
        i -= 1
    return i


def next_token_distribution(logits: np.ndarray, history: Iterable[int], config: GenerationConfig) -> np.ndarray:
    z = apply_temperature(logits, config.temperature)
    z = apply_repetition_penalty(z, history, config.repetition_penalty)
    probs, _ = filter_top_k_top_p(softmax(z), config.top_k, config.top_p)
    return probs


def sample_next(
    logits: np.ndarray, history: Iterable[int], config: GenerationConfig, rng: np.random.Generator
) -> int:
    return sample_token(next_token_distribution(logits, history, config), rng)


def next_token_nll(logit_rows: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood over positions 2..T (the first is not scored).

    A single-position sequence has nothing to score and yields 0.0.
    """
    return nll_and_grad(logit_rows, targets)[0]


def nll_and_grad(logit_rows: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logit_rows, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError(f"expected [T, V] logits and [T] targets, got {logits.shape} and {targets.shape}")
    t_len, vocab = logits.shape
    if t_len < 1:
        raise ValueError("need at least one position")
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise ValueError("target id out of range")
    grad = np.zeros_like(logits)
    if t_len == 1:
        return 0.0, grad
    lp = log_softmax(logits[1:])
    rows = np.arange(t_len - 1)
    tgt = targets[1:].astype(np.int64)
    loss = float(-lp[rows, tgt].mean())
    g = np.exp(lp)
    g[rows, tgt] -= 1.0
    grad[1:] = g / (t_len - 1)
    return loss, grad

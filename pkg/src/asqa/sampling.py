"""Speech-subset filtering and class-balanced sampling without replacement."""

from __future__ import annotations

from collections import Counter
from typing import Any, Sequence

import numpy as np

from .records import meta_of

NO_SPEECH_MAX = 0.2
MIN_WORDS_EXCLUSIVE = 5


def word_count(text: str | None) -> int:
    return len(text.split()) if text else 0


def keeps_speech(item: Any) -> bool:
    m = meta_of(item)
    if m.no_speech_prob is None or m.spoken_text is None:
        return False
    return m.no_speech_prob < NO_SPEECH_MAX and word_count(m.spoken_text) > MIN_WORDS_EXCLUSIVE


def filter_speech(records: Sequence[Any]) -> list[Any]:
    """Keep clips confidently containing speech with more than five words."""
    return [r for r in records if keeps_speech(r)]


def label_frequencies(records: Sequence[Any]) -> Counter:
    freq: Counter = Counter()
    for r in records:
        freq.update(meta_of(r).audio_event_labels)
    return freq


def balance_weights(records: Sequence[Any]) -> np.ndarray:
    """Per-record weight: mean over its labels of 1 / corpus label frequency."""
    freq = label_frequencies(records)
    w = np.empty(len(records))
    for i, r in enumerate(records):
        labels = meta_of(r).audio_event_labels
        if not labels:
            raise ValueError(f"record {meta_of(r).clip_id!r} has no audio event labels")
        w[i] = sum(1.0 / freq[l] for l in labels) / len(labels)
    return w


def weighted_draws(weights: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """Sequential inverse-CDF draws without replacement, renormalizing after each."""
    w = np.array(weights, dtype=np.float64)
    if k > len(w):
        raise ValueError(f"cannot draw {k} from {len(w)} records")
    picked = []
    for _ in range(k):
        cdf = np.cumsum(w)
        u = rng.random() * cdf[-1]
        i = int(np.searchsorted(cdf, u, side="right"))
        i = min(i, len(w) - 1)
        while w[i] == 0:  # u landed on a float boundary of a removed item
            i -= 1
        picked.append(i)
        w[i] = 0.0
    return picked


def balanced_sample(records: Sequence[Any], k: int, seed: int) -> list[Any]:
    """Draw ``k`` records with probability proportional to their balance weight.

    Records are sorted by clip_id first, so the selection does not depend on
    manifest order. The result is returned in clip_id order.
    """
    if k > len(records):
        raise ValueError(f"k={k} exceeds population of {len(records)}")
    if k < 0:
        raise ValueError("k must be >= 0")
    ordered = sorted(records, key=lambda r: meta_of(r).clip_id)
    w = balance_weights(ordered)
    idx = weighted_draws(w, k, np.random.default_rng(seed))
    return [ordered[i] for i in sorted(idx)]

"""Byte-level corpora, batching and perplexity."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .functional import cross_entropy
from .tensor import no_grad


@dataclass(frozen=True)
class Corpus:
    ids: np.ndarray
    split: int
    vocab_size: int = 256

    def __post_init__(self):
        if self.ids.size and self.ids.max() >= self.vocab_size:
            raise ValueError("token id exceeds vocabulary")
        if not 0 < self.split < self.ids.size:
            raise ValueError("both train and eval splits must be nonempty")

    @property
    def train(self) -> np.ndarray:
        return self.ids[: self.split]

    @property
    def eval(self) -> np.ndarray:
        return self.ids[self.split :]


def corpus_from_bytes(raw: bytes, split_fraction: float = 0.9) -> Corpus:
    if not raw:
        raise ValueError("corpus is empty")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split fraction must be in (0, 1)")
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    return Corpus(ids, int(round(len(ids) * split_fraction)))


def load_corpus(path: str | os.PathLike, split_fraction: float = 0.9) -> Corpus:
    """Read a file as raw bytes; the first ``split_fraction`` is training data."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return corpus_from_bytes(raw, split_fraction)


_SUBJECTS = ["the cat", "a dog", "the old man", "my sister", "the robot", "a small bird",
             "the teacher", "our neighbour", "the farmer", "a young girl"]
_VERBS = ["sees", "likes", "finds", "carries", "paints", "follows", "builds", "watches"]
_OBJECTS = ["the red ball", "a wooden box", "the green tree", "an apple", "the river",
            "a blue kite", "the tall tower", "some bread", "the garden", "a letter"]
_PLACES = ["in the park", "at home", "near the lake", "on monday", "after lunch", "by the road"]


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like text from a tiny grammar, ``n_bytes`` long."""
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        sentence = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
        if rng.random() < 0.5:
            sentence += " " + str(rng.choice(_PLACES))
        sentence = sentence[0].upper() + sentence[1:] + (". " if rng.random() < 0.8 else ".\n")
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts).encode("ascii")[:n_bytes]


def sample_batch(ids: np.ndarray, batch_size: int, length: int, rng: np.random.Generator):
    """Random windows of ``length + 1`` tokens split into inputs and next-token targets."""
    if ids.size <= length:
        raise ValueError("split is shorter than one window")
    starts = rng.integers(0, ids.size - length, size=batch_size)
    windows = np.stack([ids[s : s + length + 1] for s in starts])
    return windows[:, :-1], windows[:, 1:]


def eval_windows(ids: np.ndarray, context_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping windows covering the split: inputs (N, T), targets (N, T)."""
    if ids.size == 0:
        raise ValueError("eval split is empty")
    n = (ids.size - 1) // context_length
    if n < 1:
        raise ValueError("eval split must be longer than the context length")
    used = ids[: n * context_length + 1]
    inputs = used[:-1].reshape(n, context_length)
    targets = used[1:].reshape(n, context_length)
    return inputs, targets


def mean_nll(model, ids: np.ndarray, context_length: int, batch_windows: int = 32) -> float:
    """Mean per-token negative log-likelihood (nats) over non-overlapping windows."""
    inputs, targets = eval_windows(ids, context_length)
    total = 0.0
    with no_grad():
        for i in range(0, len(inputs), batch_windows):
            x, y = inputs[i : i + batch_windows], targets[i : i + batch_windows]
            total += cross_entropy(model(x), y).item() * y.size
    return total / targets.size


def perplexity(model, ids: np.ndarray, context_length: int) -> float:
    return math.exp(mean_nll(model, ids, context_length))

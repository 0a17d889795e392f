"""Toy datasets: a teacher-labelled classification task, a Markov-chain language and a char corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .models import Batch
from .numcore import SeededRng


@dataclass
class TeacherTask:
    """Inputs are Gaussian; labels come from a fixed random tanh network plus label noise."""

    d_in: int = 32
    n_classes: int = 10
    n_train: int = 4096
    n_val: int = 1024
    teacher_width: int = 64
    label_noise: float = 0.05
    seed: int = 1234

    def __post_init__(self):
        rng = SeededRng(self.seed, 0)
        w1 = rng.normal((self.d_in, self.teacher_width)) / np.sqrt(self.d_in)
        w2 = rng.normal((self.teacher_width, self.n_classes)) * 3.0 / np.sqrt(self.teacher_width)

        def label(x, r):
            y = np.argmax(np.tanh(x @ w1) @ w2, axis=1)
            flip = r.uniform(shape=len(y)) < self.label_noise
            return np.where(flip, r.integers(0, self.n_classes, len(y)), y)

        data = SeededRng(self.seed, 1)
        self.x_train = data.normal((self.n_train, self.d_in))
        self.y_train = label(self.x_train, data)
        self.x_val = data.normal((self.n_val, self.d_in))
        self.y_val = label(self.x_val, data)

    def batches(self, batch_size: int, steps: int, seed: int) -> Iterator[Batch]:
        rng = SeededRng(seed, 7)
        for _ in range(steps):
            idx = rng.integers(0, self.n_train, batch_size)
            yield Batch(self.x_train[idx], self.y_train[idx])

    def val_batch(self) -> Batch:
        return Batch(self.x_val, self.y_val)


@dataclass
class MarkovLM:
    """Sequences from a sparse random Markov chain of the given order; infinite fresh data."""

    vocab: int = 32
    concentration: float = 0.1
    seed: int = 4321
    order: int = 1
    n_val: int = 64
    val_len: int = 32

    def __post_init__(self):
        g = np.random.Generator(np.random.Philox(key=[self.seed, 0]))
        if self.order < 1:
            raise ValueError("order must be >= 1")
        self.trans = g.dirichlet(np.full(self.vocab, self.concentration), size=self.vocab ** self.order)
        self.cum = np.cumsum(self.trans, axis=1)
        self.cum[:, -1] = 1.0
        self._val = self.sample(self.n_val, self.val_len, SeededRng(self.seed, 99))

    def sample(self, n: int, length: int, rng: SeededRng) -> np.ndarray:
        k, V = self.order, self.vocab
        out = np.empty((n, length + k), dtype=np.int64)
        out[:, :k] = rng.integers(0, V, (n, k))
        u = rng.uniform(shape=(n, length))
        for t in range(length):
            ctx = np.zeros(n, dtype=np.int64)
            for j in range(k):
                ctx = ctx * V + out[:, t + j]
            out[:, t + k] = (self.cum[ctx] < u[:, t:t + 1]).sum(axis=1)
        return out[:, k - 1:]

    def entropy_rate(self) -> float:
        """Entropy per token in nats, the floor for any model's expected loss."""
        V, k = self.vocab, self.order
        # chain over contexts: context c = (a, ..., z) moves to (..., z, x) with probability trans[c, x]
        n_ctx = V ** k
        P = np.zeros((n_ctx, n_ctx))
        nxt = (np.arange(n_ctx)[:, None] * V) % n_ctx + np.arange(V)[None, :]
        np.add.at(P, (np.repeat(np.arange(n_ctx), V), nxt.ravel()), self.trans.ravel())
        w, v = np.linalg.eig(P.T)
        pi = np.real(v[:, np.argmax(np.real(w))])
        pi = pi / pi.sum()
        p = self.trans
        h = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        return float(pi @ h)

    def batches(self, batch_size: int, seq_len: int, steps: int, seed: int) -> Iterator[Batch]:
        rng = SeededRng(seed, 11)
        for _ in range(steps):
            s = self.sample(batch_size, seq_len, rng)
            yield Batch(s[:, :-1], s[:, 1:])

    def val_batch(self, seq_len: int | None = None) -> Batch:
        s = self._val if seq_len is None else self._val[:, :seq_len + 1]
        return Batch(s[:, :-1], s[:, 1:])


class CharCorpus:
    """Character-level LM data from a plain text file, with a 90/10 train/validation split."""

    def __init__(self, path: str | Path):
        text = Path(path).read_text(encoding="utf-8")
        if len(text) < 16:
            raise ValueError(f"corpus {path} is too small")
        self.chars = sorted(set(text))
        self.vocab = len(self.chars)
        lut = {c: i for i, c in enumerate(self.chars)}
        ids = np.fromiter((lut[c] for c in text), dtype=np.int64, count=len(text))
        cut = int(0.9 * len(ids))
        self.train, self.val = ids[:cut], ids[cut:]

    def _windows(self, src: np.ndarray, starts: np.ndarray, seq_len: int) -> Batch:
        s = src[starts[:, None] + np.arange(seq_len + 1)]
        return Batch(s[:, :-1], s[:, 1:])

    def batches(self, batch_size: int, seq_len: int, steps: int, seed: int) -> Iterator[Batch]:
        rng = SeededRng(seed, 13)
        for _ in range(steps):
            yield self._windows(self.train, rng.integers(0, len(self.train) - seq_len - 1, batch_size), seq_len)

    def val_batch(self, seq_len: int, n: int = 64) -> Batch:
        starts = np.linspace(0, len(self.val) - seq_len - 2, n).astype(np.int64)
        return self._windows(self.val, starts, seq_len)


def memorization_batch(vocab: int, batch_size: int, seq_len: int, seed: int) -> Batch:
    s = SeededRng(seed, 17).integers(0, vocab, (batch_size, seq_len + 1))
    return Batch(s[:, :-1], s[:, 1:])

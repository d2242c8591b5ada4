"""Batch selection: loss-percentile admission and reducible-loss top-k.

Selective backprop admits each scored example with probability
CDF(loss; recent history)^beta, accumulating admitted examples into
mini-batches that persist across mega-batches. The reducible-loss method
subtracts a precomputed proxy-model loss per example and keeps the B_m
largest differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LossHistory:
    """Ring buffer over the most recent per-example losses."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf = np.empty(capacity, dtype=np.float64)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, loss: float) -> None:
        self._buf[self._next] = loss
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def cdf(self, loss: float) -> float:
        """Fraction of stored losses <= loss (inclusive)."""
        if self._size == 0:
            raise ValueError("empty loss history")
        return float((self._buf[:self._size] <= loss).sum()) / self._size


@dataclass(frozen=True)
class SelectionConfig:
    beta: float = 1.0
    mega_batch: int = 16
    mini_batch: int = 8
    mode: str = "selective_backprop"   # or "rho"
    free_selection: bool = False

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not self.mega_batch >= self.mini_batch >= 1:
            raise ValueError("need mega_batch >= mini_batch >= 1")
        if self.mode not in ("selective_backprop", "rho"):
            raise ValueError(f"unknown selection mode {self.mode!r}")


def sb_probability(hist: LossHistory, loss: float, beta: float) -> float:
    """CDF(loss; history)^beta; the loss must already be pushed into hist."""
    if not np.isfinite(loss):
        raise ValueError(f"non-finite loss {loss}")
    return hist.cdf(loss) ** beta


class SelectiveBackprop:
    """Streaming admission state: history plus a persistent accumulator."""

    def __init__(self, cfg: SelectionConfig, history_size: int = 1024):
        self.cfg = cfg
        self.hist = LossHistory(history_size)
        self._pending: list = []

    @property
    def pending(self) -> int:
        return len(self._pending)

    def offer(self, examples, losses, rng: np.random.Generator):
        """Score a mega-batch; returns the mini-batches completed by it.

        Each example is admitted by an independent Bernoulli(CDF^beta) draw;
        the accumulator carries over until it holds mini_batch examples.
        """
        batches = []
        for ex, loss in zip(examples, losses):
            self.hist.push(float(loss))
            p = sb_probability(self.hist, float(loss), self.cfg.beta)
            if rng.random() < p:
                self._pending.append(ex)
                if len(self._pending) == self.cfg.mini_batch:
                    batches.append(self._pending)
                    self._pending = []
        return batches


def sb_assemble(stream, cfg: SelectionConfig, hist: LossHistory,
                rng: np.random.Generator):
    """Generator over mini-batches from a stream of (example, loss) pairs.

    A partially filled accumulator at stream end is discarded.
    """
    selector = SelectiveBackprop(cfg, hist.capacity)
    selector.hist = hist
    for example, loss in stream:
        for batch in selector.offer([example], [loss], rng):
            yield batch


@dataclass
class ProxyLossTable:
    """Per-example proxy-model losses, precomputed once over the train set."""

    losses: np.ndarray

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if self.losses.ndim != 1:
            raise ValueError("proxy loss table must be 1-D")

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, ids):
        return self.losses[ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, loss in enumerate(self.losses):
                fh.write(f"{i} {float(loss)!r}\n")

    @classmethod
    def load(cls, path, expected_size: int | None = None) -> "ProxyLossTable":
        ids, losses = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                a, b = line.split()
                ids.append(int(a))
                losses.append(float(b))
        if ids != list(range(len(ids))):
            raise ValueError("proxy loss table ids must be 0..N-1 without gaps")
        if expected_size is not None and len(ids) != expected_size:
            raise ValueError(
                f"proxy loss table covers {len(ids)} examples, expected {expected_size}")
        return cls(np.array(losses))


def rho_precompute(proxy_params, dataset, batch_size: int = 64) -> ProxyLossTable:
    """One forward pass per training example through the proxy model.

    Not charged to the training budget (amortizable across runs). The table
    must cover every example; a size mismatch downstream is a hard error.
    """
    from .model import forward_mlm  # deferred: avoids cycle at import time

    losses = np.empty(len(dataset), dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        ids = np.arange(start, min(start + batch_size, len(dataset)))
        batch = dataset.batch_of(ids)
        _, per_example = forward_mlm(None, proxy_params, batch)
        losses[ids] = per_example
    return ProxyLossTable(losses)


def rho_select(mega_losses, proxy_losses, mini_batch: int) -> np.ndarray:
    """Indices of the mini_batch largest reducible losses (loss - proxy loss).

    Ties break toward the lower index; output is sorted ascending by index.
    """
    mega = np.asarray(mega_losses, dtype=np.float64)
    proxy = np.asarray(proxy_losses, dtype=np.float64)
    if mega.shape != proxy.shape or mega.ndim != 1:
        raise ValueError(f"loss vectors must be equal-length 1-D, got {mega.shape} vs {proxy.shape}")
    if not 1 <= mini_batch <= len(mega):
        raise ValueError(f"mini_batch {mini_batch} out of range for mega-batch {len(mega)}")
    reducible = mega - proxy
    order = np.argsort(-reducible, kind="stable")[:mini_batch]
    return np.sort(order)

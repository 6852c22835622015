"""Markov-chain MLE and interpolated Kneser-Ney next-state predictors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import TransitionCounts

__all__ = [
    "MarkovModel",
    "KneserNeyModel",
    "fit_mc",
    "mc_predict",
    "fit_kneser_ney",
    "kn_predict",
    "discount",
]


def _group_by_context(keys: np.ndarray, counts: np.ndarray) -> dict[tuple, tuple[np.ndarray, np.ndarray]]:
    """``{ctx: (next_states, counts)}`` with next states ascending."""
    if keys.shape[0] == 0:
        return {}
    order = np.lexsort(keys.T)
    keys, counts = keys[order], counts[order]
    ctx = keys[:, 1:]
    brk = np.flatnonzero((ctx[1:] != ctx[:-1]).any(axis=1)) + 1
    starts = np.concatenate(([0], brk, [keys.shape[0]]))
    out = {}
    for lo, hi in zip(starts[:-1].tolist(), starts[1:].tolist()):
        out[tuple(ctx[lo].tolist())] = (keys[lo:hi, 0].copy(), counts[lo:hi].copy())
    return out


def discount(counts: np.ndarray) -> float:
    """Leave-one-out absolute discount ``n1 / (n1 + 2 n2)``; zero when undefined."""
    counts = np.asarray(counts)
    n1 = int(np.count_nonzero(counts == 1))
    n2 = int(np.count_nonzero(counts == 2))
    return n1 / (n1 + 2 * n2) if n1 + 2 * n2 > 0 else 0.0


class MarkovModel:
    """Order-``m`` MLE chain with lower-order fallback for unseen contexts.

    ``tables[r - 1]`` maps an order-``r`` context (most recent state first)
    to ``(next_states, probabilities)``.  Every order below ``m`` is kept so
    unseen contexts can back off, ending at the unigram state frequencies.
    """

    def __init__(self, counts: TransitionCounts, order: int):
        if order < 1 or counts.order < order:
            raise ValueError(f"need counts of order >= {order}")
        self.order = order
        self.n_states = counts.n_states
        self.counts = counts.truncate(order)
        self.tables = []
        for r in range(1, order + 1):
            table = {}
            for ctx, (states, c) in _group_by_context(*counts.table(r)).items():
                table[ctx] = (states, c / c.sum())
            self.tables.append(table)
        sc = counts.state_counts.astype(np.float64)
        if sc.sum() <= 0:
            # no position data: fall back to next-state frequencies
            keys, c = counts.table(1)
            sc = np.bincount(keys[:, 0], weights=c, minlength=self.n_states).astype(np.float64)
        self.unigram_states = np.flatnonzero(sc > 0)
        self.unigram = sc[self.unigram_states] / sc.sum() if sc.sum() > 0 else sc[:0]

    def distribution(self, context: Sequence[int]) -> tuple[np.ndarray, np.ndarray] | None:
        """Stored vector for an exact context, or ``None`` if unseen."""
        ctx = tuple(int(h) for h in context)
        if not 1 <= len(ctx) <= self.order:
            raise ValueError("context length must lie in 1..order")
        return self.tables[len(ctx) - 1].get(ctx)

    def predict(self, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        hist = [int(h) for h in history]
        for r in range(min(self.order, len(hist)), 0, -1):
            hit = self.tables[r - 1].get(tuple(hist[:r]))
            if hit is not None:
                return hit
        return self.unigram_states, self.unigram

    def __repr__(self) -> str:
        return f"MarkovModel(order={self.order}, n_states={self.n_states})"


def fit_mc(counts: TransitionCounts, order: int) -> MarkovModel:
    return MarkovModel(counts, order)


def mc_predict(model: MarkovModel, history: Sequence[int]) -> np.ndarray:
    """Dense next-state vector with recursive fallback to shorter contexts."""
    states, probs = model.predict(history)
    out = np.zeros(model.n_states)
    out[states] = probs
    return out


class KneserNeyModel:
    """Interpolated Kneser-Ney with one absolute discount per level.

    The top level uses raw counts; a lower level ``r`` uses continuation
    counts, the number of distinct older states ``w`` seen before the
    pattern ``(i, ctx_r)`` in the level ``r + 1`` raw counts.  The recursion
    bottoms out at the continuation unigram: distinct predecessors of ``i``
    over all distinct predecessors.
    """

    def __init__(self, counts: TransitionCounts, order: int):
        if order < 1 or counts.order < order:
            raise ValueError(f"need counts of order >= {order}")
        keys1, c1 = counts.table(1)
        if keys1.shape[0] == 0:
            raise ValueError("cannot fit Kneser-Ney on empty counts")
        self.order = order
        self.n_states = n = counts.n_states
        self.counts = counts.truncate(order)
        self.levels = []
        self.discounts = []
        self.context_totals = []
        self.context_types = []
        for r in range(1, order + 1):
            if r == order:
                keys, c = counts.table(r)
            else:
                upper, _ = counts.table(r + 1)
                # one type per distinct older state w: count distinct (i, ctx_r) prefixes
                keys, c = np.unique(upper[:, : r + 1], axis=0, return_counts=True)
                keys = keys.reshape(-1, r + 1)
            c = np.asarray(c, dtype=np.int64)
            self.discounts.append(discount(c))
            grouped = _group_by_context(keys, c)
            self.levels.append(grouped)
            self.context_totals.append({k: float(v[1].sum()) for k, v in grouped.items()})
            self.context_types.append({k: int(v[1].size) for k, v in grouped.items()})
        cont = np.bincount(keys1[:, 0], minlength=n).astype(np.float64)
        self.continuation_unigram = cont / cont.sum()

    def predict_dense(self, history: Sequence[int]) -> np.ndarray:
        hist = [int(h) for h in history]
        if not hist:
            raise ValueError("history must hold at least one state")
        p = self.continuation_unigram.copy()
        for r in range(1, min(self.order, len(hist)) + 1):
            ctx = tuple(hist[:r])
            hit = self.levels[r - 1].get(ctx)
            if hit is None:
                continue
            states, c = hit
            d = self.discounts[r - 1]
            total = self.context_totals[r - 1][ctx]
            lower = p
            p = (d * self.context_types[r - 1][ctx] / total) * lower
            p[states] += np.maximum(c - d, 0.0) / total
        return p

    def predict(self, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        p = self.predict_dense(history)
        states = np.flatnonzero(p > 0)
        return states, p[states]

    def __repr__(self) -> str:
        d = ", ".join(f"{x:.4g}" for x in self.discounts)
        return f"KneserNeyModel(order={self.order}, n_states={self.n_states}, discounts=({d}))"


def fit_kneser_ney(counts: TransitionCounts, order: int) -> KneserNeyModel:
    return KneserNeyModel(counts, order)


def kn_predict(model: KneserNeyModel, history: Sequence[int]) -> np.ndarray:
    return model.predict_dense(history)

"""Trail ingestion, preprocessing, train/test splitting and transition counting.

A trail is a sequence of dense state indices.  Counting follows the usual
higher-order convention: the order-``r`` table holds ``c(i, j1, ..., jr)``,
the number of positions where state ``i`` follows the history
``(j1, ..., jr)`` with ``j1`` the most recent state.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Iterator, Sequence, TextIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "CorpusError",
    "EmptyCorpusError",
    "ParseError",
    "StateSpace",
    "TrailCorpus",
    "TransitionCounts",
    "parse_trails",
    "encode_trails",
    "preprocess",
    "split_train_test",
    "count_transitions",
    "write_trails",
    "merge_counts",
    "corpus_summary",
]

FORMATS = ("ws", "csv")


class CorpusError(ValueError):
    """Raised for invalid trail data."""


class EmptyCorpusError(CorpusError):
    pass


class ParseError(CorpusError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class StateSpace:
    """Bijection between raw state tokens and indices ``0..N-1``."""

    tokens: tuple
    index_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        index = {tok: i for i, tok in enumerate(tokens)}
        if len(index) != len(tokens):
            raise CorpusError("duplicate tokens in state space")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "index_of", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_states(self) -> int:
        return len(self.tokens)

    def encode(self, token: Hashable) -> int:
        return self.index_of[token]

    def decode(self, index: int) -> Hashable:
        return self.tokens[index]

    @classmethod
    def range(cls, n: int) -> "StateSpace":
        """State space whose tokens are the integers themselves."""
        return cls(tuple(range(n)))


class TrailCorpus:
    """Immutable collection of trails over ``n_states`` states."""

    def __init__(self, trails: Iterable[Sequence[int]], n_states: int):
        arrays = []
        for t in trails:
            a = np.array(t, dtype=np.int64).reshape(-1)
            if a.size == 0:
                raise CorpusError("trails must have length >= 1")
            if a.min() < 0 or a.max() >= n_states:
                raise CorpusError(f"state index out of range for N={n_states}")
            a.flags.writeable = False
            arrays.append(a)
        self._trails = tuple(arrays)
        self.n_states = int(n_states)

    @property
    def trails(self) -> tuple:
        return self._trails

    def __len__(self) -> int:
        return len(self._trails)

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self._trails)

    def __getitem__(self, i) -> np.ndarray:
        return self._trails[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrailCorpus):
            return NotImplemented
        return self.n_states == other.n_states and self.as_lists() == other.as_lists()

    def __repr__(self) -> str:
        return (f"TrailCorpus(n_trails={len(self)}, n_states={self.n_states}, "
                f"n_transitions={self.n_transitions})")

    def as_lists(self) -> list[list[int]]:
        return [t.tolist() for t in self._trails]

    @property
    def n_transitions(self) -> int:
        return int(sum(max(len(t) - 1, 0) for t in self._trails))

    def state_counts(self) -> np.ndarray:
        """Occurrences of every state over all trail positions."""
        if not self._trails:
            return np.zeros(self.n_states, dtype=np.int64)
        return np.bincount(np.concatenate(self._trails), minlength=self.n_states)

    def subset(self, indices: Iterable[int]) -> "TrailCorpus":
        return TrailCorpus([self._trails[i] for i in indices], self.n_states)


def _split_line(line: str, fmt: str, lineno: int) -> list[str]:
    if fmt == "ws":
        return line.split()
    tokens = [tok.strip() for tok in line.split(",")]
    if any(tok == "" for tok in tokens):
        raise ParseError(lineno, "empty field in comma-separated trail")
    return tokens


def _read_token_trails(stream: TextIO, fmt: str) -> list[list[str]]:
    if fmt not in FORMATS:
        raise ValueError(f"unknown trail format {fmt!r}; expected one of {FORMATS}")
    out = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        if "\x00" in line:
            raise ParseError(lineno, "NUL byte in trail line")
        out.append(_split_line(line.strip(), fmt, lineno))
    return out


def encode_trails(space: StateSpace, token_trails: Iterable[Sequence[Hashable]]) -> TrailCorpus:
    """Encode token trails with a fixed state space.

    Unknown tokens split the trail, the same rule preprocessing applies to
    pruned states, so no transition ever bridges an unknown state.
    """
    trails = []
    for toks in token_trails:
        cur: list[int] = []
        for tok in toks:
            idx = space.index_of.get(tok)
            if idx is None:
                if cur:
                    trails.append(cur)
                cur = []
            else:
                cur.append(idx)
        if cur:
            trails.append(cur)
    return TrailCorpus(trails, len(space))


def parse_trails(stream: TextIO | str, fmt: str = "ws",
                 space: StateSpace | None = None) -> tuple[StateSpace, TrailCorpus]:
    """Read one trail per line.

    Parameters
    ----------
    stream : text stream or str
        Line-oriented input; blank lines are ignored.
    fmt : {"ws", "csv"}
        Token separator: whitespace or comma.
    space : StateSpace, optional
        Encode against an existing state space (tokens outside it split
        trails).  By default indices follow order of first appearance.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    token_trails = _read_token_trails(stream, fmt)
    if not token_trails:
        raise EmptyCorpusError("trail stream is empty")
    if space is None:
        index: dict[str, int] = {}
        for toks in token_trails:
            for tok in toks:
                if tok not in index:
                    index[tok] = len(index)
        space = StateSpace(tuple(index))
    return space, encode_trails(space, token_trails)


def write_trails(stream: TextIO, corpus: TrailCorpus, space: StateSpace | None = None,
                 fmt: str = "ws") -> None:
    sep = " " if fmt == "ws" else ","
    for trail in corpus:
        toks = trail.tolist() if space is None else [space.tokens[i] for i in trail]
        stream.write(sep.join(str(t) for t in toks))
        stream.write("\n")


def _collapse_repeats(trail: np.ndarray) -> np.ndarray:
    if trail.size < 2:
        return trail
    keep = np.ones(trail.size, dtype=bool)
    keep[1:] = trail[1:] != trail[:-1]
    return trail[keep]


def _split_at(trail: np.ndarray, removed: np.ndarray) -> list[np.ndarray]:
    bad = removed[trail]
    if not bad.any():
        return [trail]
    pieces = []
    start = 0
    for pos in np.flatnonzero(bad):
        if pos > start:
            pieces.append(trail[start:pos])
        start = pos + 1
    if start < trail.size:
        pieces.append(trail[start:])
    return pieces


def preprocess(corpus: TrailCorpus, min_state_count: int = 20, drop_self_loops: bool = True,
               space: StateSpace | None = None) -> tuple[StateSpace, TrailCorpus]:
    """Collapse self-loops, prune rare states and re-index densely.

    A state survives only if it occurs strictly more than ``min_state_count``
    times (counted after self-loop collapse).  Trails are split at pruned
    states and fragments shorter than two states are dropped.  Because
    dropping fragments lowers other states' counts, pruning repeats until
    nothing changes; the result is a fixed point, so preprocessing twice is
    the same as preprocessing once.

    Returns the new state space (surviving tokens of ``space``, or surviving
    old indices when ``space`` is omitted) and the re-indexed corpus.
    """
    if min_state_count < 0:
        raise ValueError("min_state_count must be >= 0")
    n = corpus.n_states
    trails = list(corpus)
    if drop_self_loops:
        trails = [_collapse_repeats(t) for t in trails]
    trails = [t for t in trails if t.size >= 2]
    alive = np.ones(n, dtype=bool)
    while True:
        counts = (np.bincount(np.concatenate(trails), minlength=n) if trails
                  else np.zeros(n, dtype=np.int64))
        removed = alive & (counts <= min_state_count)
        if not removed.any():
            break
        alive &= ~removed
        pieces = []
        for t in trails:
            pieces.extend(p for p in _split_at(t, removed) if p.size >= 2)
        trails = pieces
    survivors = np.flatnonzero(alive & (counts > 0)) if trails else np.array([], dtype=np.int64)
    remap = np.full(n, -1, dtype=np.int64)
    remap[survivors] = np.arange(survivors.size)
    old_tokens = space.tokens if space is not None else tuple(range(n))
    new_space = StateSpace(tuple(old_tokens[i] for i in survivors))
    return new_space, TrailCorpus([remap[t] for t in trails], survivors.size)


def split_train_test(corpus: TrailCorpus, train_fraction: float = 0.6,
                     seed: int = 0) -> tuple[TrailCorpus, TrailCorpus]:
    """Seeded split keeping whole trails together.

    The train side gets ``round(train_fraction * n)`` trails, clamped so both
    sides are nonempty.  Trails keep their original relative order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(corpus)
    if n < 2:
        raise CorpusError("need at least two trails to split")
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return corpus.subset(train_idx.tolist()), corpus.subset(test_idx.tolist())


def _unique_rows(rows: np.ndarray, n_states: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lexicographically sorted unique rows, their counts and inverse map."""
    width = rows.shape[1]
    if rows.shape[0] == 0:
        return rows.reshape(0, width), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if float(n_states) ** width < 2.0 ** 62:
        key = np.zeros(rows.shape[0], dtype=np.int64)
        for c in range(width):
            key = key * n_states + rows[:, c]
        _, first, inverse, counts = np.unique(key, return_index=True, return_inverse=True,
                                              return_counts=True)
        return rows[first], counts.astype(np.int64), inverse.reshape(-1)
    uniq, inverse, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return uniq, counts.astype(np.int64), inverse.reshape(-1)


class TransitionCounts:
    """Sparse count tables of orders ``1..order``.

    ``table(r)`` returns ``(keys, counts)`` where ``keys`` has shape
    ``(E, r + 1)`` with columns ``[i, j1, ..., jr]`` (``j1`` most recent),
    sorted lexicographically, and ``counts`` are positive integers.
    ``state_counts`` holds per-state occurrences over all trail positions
    (the unigram used by the Markov-chain fallback).
    """

    def __init__(self, order: int, n_states: int, tables: Sequence[tuple[np.ndarray, np.ndarray]],
                 state_counts: np.ndarray | None = None):
        if order < 1:
            raise ValueError("order must be >= 1")
        if len(tables) != order:
            raise ValueError(f"expected {order} tables, got {len(tables)}")
        self.order = int(order)
        self.n_states = int(n_states)
        norm = []
        for r, (keys, counts) in enumerate(tables, start=1):
            keys = np.asarray(keys, dtype=np.int64).reshape(-1, r + 1)
            counts = np.asarray(counts, dtype=np.int64).reshape(-1)
            if keys.shape[0] != counts.shape[0]:
                raise ValueError(f"order-{r} keys and counts differ in length")
            if keys.size and (keys.min() < 0 or keys.max() >= n_states):
                raise ValueError(f"order-{r} table has out-of-range state index")
            if counts.size and counts.min() < 0:
                raise ValueError("counts must be nonnegative")
            # canonical form: unique, lexicographically sorted, positive counts
            uniq, _, inverse = _unique_rows(keys, self.n_states)
            summed = np.bincount(inverse, weights=counts, minlength=uniq.shape[0]).astype(np.int64)
            pos = summed > 0
            uniq, summed = uniq[pos], summed[pos]
            uniq.flags.writeable = False
            summed.flags.writeable = False
            norm.append((uniq, summed))
        self._tables = tuple(norm)
        if state_counts is None:
            state_counts = np.zeros(n_states, dtype=np.int64)
        sc = np.asarray(state_counts, dtype=np.int64).reshape(-1)
        if sc.shape[0] != n_states:
            raise ValueError("state_counts must have length n_states")
        sc.flags.writeable = False
        self.state_counts = sc

    def table(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        if not 1 <= r <= self.order:
            raise ValueError(f"order {r} outside 1..{self.order}")
        return self._tables[r - 1]

    def as_dict(self, r: int) -> dict[tuple, int]:
        keys, counts = self.table(r)
        return {tuple(k): int(c) for k, c in zip(keys.tolist(), counts.tolist())}

    def context_totals(self, r: int) -> dict[tuple, int]:
        """Map each stored order-``r`` context to ``sum_i c(i, ctx)``."""
        out: dict[tuple, int] = {}
        keys, counts = self.table(r)
        for k, c in zip(keys[:, 1:].tolist(), counts.tolist()):
            ctx = tuple(k)
            out[ctx] = out.get(ctx, 0) + int(c)
        return out

    def n_entries(self, r: int | None = None) -> int:
        return int(self.table(self.order if r is None else r)[0].shape[0])

    def is_empty(self) -> bool:
        return all(k.shape[0] == 0 for k, _ in self._tables)

    def truncate(self, order: int) -> "TransitionCounts":
        """The same counts restricted to orders ``1..order``."""
        return TransitionCounts(order, self.n_states, self._tables[:order], self.state_counts)

    def __add__(self, other: "TransitionCounts") -> "TransitionCounts":
        if not isinstance(other, TransitionCounts):
            return NotImplemented
        if (self.order, self.n_states) != (other.order, other.n_states):
            raise ValueError("can only merge counts of equal order and state space")
        tables = []
        for (ka, ca), (kb, cb) in zip(self._tables, other._tables):
            tables.append((np.vstack([ka, kb]), np.concatenate([ca, cb])))
        return TransitionCounts(self.order, self.n_states, tables,
                                self.state_counts + other.state_counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionCounts):
            return NotImplemented
        if (self.order, self.n_states) != (other.order, other.n_states):
            return False
        if not np.array_equal(self.state_counts, other.state_counts):
            return False
        return all(np.array_equal(ka, kb) and np.array_equal(ca, cb)
                   for (ka, ca), (kb, cb) in zip(self._tables, other._tables))

    def __repr__(self) -> str:
        sizes = ", ".join(str(k.shape[0]) for k, _ in self._tables)
        return f"TransitionCounts(order={self.order}, n_states={self.n_states}, entries=[{sizes}])"

    def export(self, stream: TextIO) -> None:
        """One line per entry: ``i<TAB>j[<TAB>k...]<TAB>count``, orders ascending."""
        for keys, counts in self._tables:
            for k, c in zip(keys.tolist(), counts.tolist()):
                stream.write("\t".join(map(str, k)))
                stream.write(f"\t{c}\n")


def count_transitions(corpus: TrailCorpus, order: int) -> TransitionCounts:
    """Build count tables of orders ``1..order`` in one pass over the corpus."""
    if order < 1:
        raise ValueError("order must be >= 1")
    n = corpus.n_states
    tables = []
    trails = [t for t in corpus if t.size >= 2]
    for r in range(1, order + 1):
        chunks = []
        for t in trails:
            if t.size > r:
                # window rows are (s_{t-r}, ..., s_t); reverse to (s_t, s_{t-1}, ..., s_{t-r})
                chunks.append(sliding_window_view(t, r + 1)[:, ::-1])
        rows = np.vstack(chunks) if chunks else np.zeros((0, r + 1), dtype=np.int64)
        keys, counts, _ = _unique_rows(np.ascontiguousarray(rows), n)
        tables.append((keys, counts))
    return TransitionCounts(order, n, tables, corpus.state_counts())


def merge_counts(parts: Iterable[TransitionCounts]) -> TransitionCounts:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def corpus_summary(corpus: TrailCorpus) -> dict:
    lengths = [len(t) for t in corpus]
    return {
        "n_states": corpus.n_states,
        "n_trails": len(corpus),
        "n_transitions": corpus.n_transitions,
        "mean_trail_length": float(np.mean(lengths)) if lengths else 0.0,
        "distinct_states_seen": int(np.count_nonzero(corpus.state_counts())),
    }

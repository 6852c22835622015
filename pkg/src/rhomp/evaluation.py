"""Ranking metrics and the train/test evaluation harness.

Any predictor works as long as it has an ``order`` attribute and a
``predict(history) -> (states, probabilities)`` method, history most recent
first.  Ranked lists contain only states with positive probability, sorted
by descending probability with ties broken by ascending state index; a true
state outside the list has reciprocal rank 0 and is never a top-k hit.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .baselines import fit_kneser_ney, fit_mc
from .corpus import TrailCorpus, TransitionCounts, count_transitions
from .model import (TrainerConfig, beta_from_alpha, fit_fixed_weights, select_alpha,
                    weights_from_beta)

__all__ = [
    "FAMILIES",
    "Cascade",
    "EvalReport",
    "StateRecord",
    "Bucket",
    "precision_at_k",
    "reciprocal_rank",
    "rank_of",
    "ranked_states",
    "evaluate",
    "frequency_buckets",
    "train_family",
    "order_sweep",
    "aggregate_reports",
]

FAMILIES = ("mc", "kneser", "rhomp")


def precision_at_k(ranked: Sequence[int], truth: int, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(truth in list(ranked)[:k])


def reciprocal_rank(ranked: Sequence[int], truth: int) -> float:
    ranked = list(ranked)
    return 1.0 / (ranked.index(truth) + 1) if truth in ranked else 0.0


def ranked_states(states: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Full deterministic ranking of the positive-probability states."""
    states = np.asarray(states)
    probs = np.asarray(probs)
    keep = probs > 0
    states, probs = states[keep], probs[keep]
    return states[np.lexsort((states, -probs))]


def rank_of(states: np.ndarray, probs: np.ndarray, truth: int) -> float:
    """1-based rank of ``truth`` without sorting; ``inf`` when absent."""
    hit = np.flatnonzero(states == truth)
    if hit.size == 0:
        return math.inf
    p = probs[hit[0]]
    if not p > 0:
        return math.inf
    return float(1 + np.count_nonzero(probs > p) + np.count_nonzero((probs == p) & (states < truth)))


class Cascade:
    """Models of orders ``1..m``; a history of length ``r`` goes to order ``min(m, r)``."""

    def __init__(self, members: Sequence):
        self.members = list(members)
        for r, mod in enumerate(self.members, start=1):
            if mod.order != r:
                raise ValueError(f"cascade member {r} has order {mod.order}")
        if not self.members:
            raise ValueError("empty cascade")

    @property
    def order(self) -> int:
        return len(self.members)

    def prefix(self, m: int) -> "Cascade":
        return Cascade(self.members[:m])

    def predict(self, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        r = min(self.order, len(history))
        if r < 1:
            raise ValueError("need at least one history state")
        return self.members[r - 1].predict(list(history[:r]))


@dataclass
class StateRecord:
    state: int
    train_count: int
    correct: dict
    total: int = 0


@dataclass
class EvalReport:
    ks: tuple
    precision_at_k: dict
    mrr: float
    n_transitions: int
    per_state: dict = field(default_factory=dict)
    ranks: np.ndarray = field(default=None, repr=False)

    def to_records(self, family: str | None = None, order: int | None = None) -> list[dict]:
        return [{"family": family, "order": order, "k": k, "precision": self.precision_at_k[k],
                 "mrr": self.mrr, "n_transitions": self.n_transitions} for k in self.ks]

    def to_json(self, family: str | None = None, order: int | None = None) -> str:
        return json.dumps(self.to_records(family, order), indent=2)


def _ranks_for(predictor, trails: Sequence[np.ndarray], n_states: int) -> tuple[list, list]:
    cache: dict[tuple, tuple] = {}
    m = predictor.order
    ranks, truths = [], []
    for trail in trails:
        seq = trail.tolist()
        for t in range(1, len(seq)):
            truth = seq[t]
            if not 0 <= truth < n_states:
                continue
            hist = tuple(seq[max(t - m, 0):t][::-1])
            pred = cache.get(hist)
            if pred is None:
                states, probs = predictor.predict(list(hist))
                pred = cache[hist] = (np.asarray(states), np.asarray(probs))
            ranks.append(rank_of(pred[0], pred[1], truth))
            truths.append(truth)
    return ranks, truths


def evaluate(predictor, test: TrailCorpus, ks: Sequence[int] = (1, 2, 3, 4, 5),
             train_state_counts: np.ndarray | None = None, threads: int = 1) -> EvalReport:
    """Precision@k and MRR over every transition of the test trails.

    The transition at position ``t`` is predicted from the ``min(order, t)``
    preceding states; a :class:`Cascade` routes short histories to its
    lower-order members.  Per-state records (keyed by true next state)
    carry ``train_state_counts`` for frequency bucketing.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive integers")
    if test.n_transitions == 0:
        raise ValueError("test corpus has no transitions")
    trails = list(test)
    if threads > 1 and len(trails) > 1:
        chunks = [c for c in np.array_split(np.arange(len(trails)), threads) if c.size]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda idx: _ranks_for(predictor, [trails[i] for i in idx],
                                                         test.n_states), chunks))
        ranks = [r for p in parts for r in p[0]]
        truths = [t for p in parts for t in p[1]]
    else:
        ranks, truths = _ranks_for(predictor, trails, test.n_states)
    if not ranks:
        raise ValueError("no evaluable test transitions")
    ranks_arr = np.asarray(ranks, dtype=np.float64)
    truths_arr = np.asarray(truths, dtype=np.int64)
    n = ranks_arr.size
    prec = {k: float(np.count_nonzero(ranks_arr <= k)) / n for k in ks}
    # correctly rounded sum: independent of transition order and partitioning
    mrr = math.fsum((1.0 / ranks_arr).tolist()) / n
    tc = (np.zeros(test.n_states, dtype=np.int64) if train_state_counts is None
          else np.asarray(train_state_counts))
    seen, inv = np.unique(truths_arr, return_inverse=True)
    totals = np.bincount(inv, minlength=seen.size)
    hits = {k: np.bincount(inv, weights=ranks_arr <= k, minlength=seen.size) for k in ks}
    per_state = {}
    for pos, s in enumerate(seen.tolist()):
        per_state[s] = StateRecord(s, int(tc[s]) if s < tc.size else 0,
                                   {k: int(hits[k][pos]) for k in ks}, int(totals[pos]))
    return EvalReport(ks, prec, mrr, n, per_state, ranks_arr)


@dataclass
class Bucket:
    index: int
    states: list
    median_train_count: float
    n_transitions: int
    precision: dict

    def csv_row(self, k: int) -> str:
        return f"{self.index},{self.median_train_count:g},{self.precision[k]:.6f}"


def frequency_buckets(report: EvalReport, min_transitions: int = 1000,
                      min_states: int = 5) -> list[Bucket]:
    """Group states by descending training count into buckets.

    States are added greedily until a bucket holds at least
    ``min_transitions`` test transitions and ``min_states`` states.  A
    trailing group that misses either threshold is merged into the previous
    bucket (or forms the only bucket).  Bucket precision is pooled: correct
    predictions over test transitions in the bucket.
    """
    if not report.per_state:
        raise ValueError("report has no per-state records")
    recs = sorted(report.per_state.values(), key=lambda r: (-r.train_count, r.state))
    groups: list[list[StateRecord]] = []
    cur: list[StateRecord] = []
    for rec in recs:
        cur.append(rec)
        if len(cur) >= min_states and sum(r.total for r in cur) >= min_transitions:
            groups.append(cur)
            cur = []
    if cur:
        if groups:
            groups[-1].extend(cur)
        else:
            groups.append(cur)
    out = []
    for i, g in enumerate(groups):
        total = sum(r.total for r in g)
        prec = {k: (sum(r.correct[k] for r in g) / total if total else 0.0) for k in report.ks}
        out.append(Bucket(i, [r.state for r in g], float(np.median([r.train_count for r in g])),
                          total, prec))
    return out


def buckets_csv(buckets: Iterable[Bucket], k: int) -> str:
    lines = ["bucket_index,median_train_count,precision"]
    lines += [b.csv_row(k) for b in buckets]
    return "\n".join(lines) + "\n"


@dataclass
class FamilyFit:
    cascade: Cascade | None = None
    alpha: float | None = None
    beta: float | None = None
    traces: dict = field(default_factory=dict)


def _rhomp_member(counts: TransitionCounts, order: int, config: TrainerConfig,
                  alpha: float | None, beta: float | None, fit: FamilyFit, n_nodes: int,
                  threads: int):
    if order == 1:
        model, trace = fit_fixed_weights(counts, [1.0], config)
    elif order == 2 and beta is None:
        if alpha is None:
            sel = select_alpha(counts, n_nodes, config, threads=threads)
            model, trace, fit.alpha = sel.model, sel.trace, sel.alpha
        else:
            model, trace = fit_fixed_weights(counts, [alpha, 1.0 - alpha], config)
            fit.alpha = alpha
    else:
        if beta is None:
            if fit.alpha is None:
                _rhomp_member(counts, 2, config, alpha, None, fit, n_nodes, threads)
            beta = beta_from_alpha(fit.alpha)
        fit.beta = beta
        model, trace = fit_fixed_weights(counts, weights_from_beta(beta, order), config)
    fit.traces[order] = trace
    return model


def train_family(family: str, counts: TransitionCounts, order: int,
                 config: TrainerConfig | None = None, alpha: float | None = None,
                 beta: float | None = None, n_nodes: int = 15, threads: int = 1) -> FamilyFit:
    """Train cascade members of orders ``1..order`` for one model family.

    RHOMP order 2 selects its weight on Chebyshev nodes unless ``alpha`` is
    given; higher orders use truncated-geometric weights with ``beta``
    (default: derived from the order-2 weight).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if counts.order < order:
        raise ValueError("counts do not reach the requested order")
    config = config or TrainerConfig()
    if family == "mc":
        return FamilyFit(Cascade([fit_mc(counts, r) for r in range(1, order + 1)]))
    if family == "kneser":
        return FamilyFit(Cascade([fit_kneser_ney(counts, r) for r in range(1, order + 1)]))
    fit = FamilyFit()
    members = [_rhomp_member(counts, r, config, alpha, beta, fit, n_nodes, threads)
               for r in range(1, order + 1)]
    fit.cascade = Cascade(members)
    return fit


def order_sweep(train: TrailCorpus, test: TrailCorpus, max_order: int,
                families: Iterable[str] = FAMILIES, ks: Sequence[int] = (1, 2, 3, 4, 5),
                config: TrainerConfig | None = None, alpha: float | None = None,
                beta: float | None = None, n_nodes: int = 15,
                threads: int = 1) -> dict[tuple[str, int], EvalReport]:
    """Evaluate every family at orders ``1..max_order`` with the cascade rule."""
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    counts = count_transitions(train, max_order)
    sc = train.state_counts()
    out = {}
    for family in families:
        fit = train_family(family, counts, max_order, config, alpha, beta, n_nodes, threads)
        for m in range(1, max_order + 1):
            out[(family, m)] = evaluate(fit.cascade.prefix(m), test, ks, sc, threads)
    return out


def aggregate_reports(reports: Sequence[EvalReport]) -> dict:
    """Mean and sample standard deviation of precision@k and MRR over repetitions."""
    if not reports:
        raise ValueError("nothing to aggregate")
    ks = reports[0].ks
    ddof = 1 if len(reports) > 1 else 0
    out = {"n_trials": len(reports), "precision_mean": {}, "precision_sd": {}}
    for k in ks:
        vals = np.array([r.precision_at_k[k] for r in reports])
        out["precision_mean"][k] = float(vals.mean())
        out["precision_sd"][k] = float(vals.std(ddof=ddof))
    mrr = np.array([r.mrr for r in reports])
    out["mrr_mean"] = float(mrr.mean())
    out["mrr_sd"] = float(mrr.std(ddof=ddof))
    return out


def report_rows(reports: Mapping[tuple[str, int], EvalReport]) -> list[dict]:
    rows = []
    for (family, order), rep in reports.items():
        rows.extend(rep.to_records(family, order))
    return rows

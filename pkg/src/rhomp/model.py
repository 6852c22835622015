"""Retrospective higher-order Markov processes (RHOMP).

An order-``m`` RHOMP moves to state ``i`` from the history
``(j1, ..., jm)`` (``j1`` most recent) with probability

    sum_r  alpha_r * R[r][i, j_r]

i.e. it first picks a history slot ``r`` with probability ``alpha_r`` and
then takes one first-order step from that slot's state using the slot's
own column-stochastic matrix.  Fitting maximises the count-weighted log
likelihood with the weights held fixed; the problem is convex and is
solved by projected gradient descent with an adaptive step.
"""

from __future__ import annotations

import bisect
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from numpy.polynomial import Chebyshev
from scipy.sparse.csgraph import connected_components

from .corpus import TransitionCounts
from .stochastic import ColumnStochasticMatrix, project_segments

__all__ = [
    "RhompModel",
    "TrainerConfig",
    "FitTrace",
    "AlphaSelection",
    "StationaryResult",
    "SamplingError",
    "transition_distribution",
    "log_likelihood",
    "gradients",
    "fit_fixed_weights",
    "random_initial_model",
    "chebyshev_nodes",
    "minimize_interpolant",
    "select_alpha",
    "weights_from_beta",
    "beta_from_alpha",
    "stationary_distribution",
    "sample_trail",
    "normalize_factor_pair",
    "predict_topk",
]

log = logging.getLogger(__name__)

MIN_STEP = 1e-12


class SamplingError(RuntimeError):
    pass


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size < 1:
        raise ValueError("need at least one weight")
    if not np.all(np.isfinite(w)) or (w < 0).any():
        raise ValueError(f"weights must be finite and nonnegative, got {w.tolist()}")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"weights must sum to 1, got sum {w.sum()!r}")
    return w


class RhompModel:
    """Order, slot weights and one column-stochastic matrix per history slot.

    ``matrices[0]`` is keyed by the most recent state, ``matrices[-1]`` by
    the oldest.  For ``m == 2`` the weights are ``(alpha, 1 - alpha)`` and
    the matrices are the usual ``R`` and ``Q``.
    """

    def __init__(self, weights, matrices: Sequence[ColumnStochasticMatrix]):
        self.weights = _check_weights(weights)
        self.weights.flags.writeable = False
        self.matrices = tuple(matrices)
        if len(self.matrices) != self.weights.size:
            raise ValueError("need exactly one matrix per weight")
        ns = {mat.n for mat in self.matrices}
        if len(ns) != 1:
            raise ValueError("all matrices must share one state space")
        self.n_states = ns.pop()

    @property
    def order(self) -> int:
        return len(self.matrices)

    @property
    def alpha(self) -> float:
        return float(self.weights[0])

    def validate(self) -> None:
        _check_weights(self.weights)
        for mat in self.matrices:
            mat.validate()

    def __eq__(self, other) -> bool:
        if not isinstance(other, RhompModel):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights)
                and all(a == b for a, b in zip(self.matrices, other.matrices)))

    def __repr__(self) -> str:
        w = ", ".join(f"{x:.4g}" for x in self.weights)
        return f"RhompModel(order={self.order}, n_states={self.n_states}, weights=({w}))"

    def predict(self, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Sparse next-state distribution as ``(states, probabilities)``."""
        return _sparse_mixture(self, history)

    def transition_matrix(self) -> sp.csc_matrix:
        """First-order aggregate ``P = sum_r alpha_r R[r]`` with per-column renormalisation."""
        n = self.n_states
        total = sp.csc_matrix((n, n))
        mass = np.zeros(n)
        for a, mat in zip(self.weights, self.matrices):
            total = total + a * mat.to_csc()
            present = np.zeros(n)
            present[mat.nonempty_columns()] = 1.0
            mass += a * present
        scale = np.divide(1.0, mass, out=np.zeros(n), where=mass > 0)
        return sp.csc_matrix(total @ sp.diags(scale))


@dataclass(frozen=True)
class TrainerConfig:
    initial_step: float = 1.0
    tolerance: float = 1e-5
    max_iterations: int = 500
    probability_floor: float = 1e-12

    def __post_init__(self):
        if not self.initial_step > 0:
            raise ValueError("initial_step must be > 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.probability_floor <= 1e-8:
            raise ValueError("probability_floor must lie in (0, 1e-8]")

    def relaxed(self, factor: float = 10.0) -> "TrainerConfig":
        return TrainerConfig(self.initial_step, self.tolerance * factor,
                             self.max_iterations, self.probability_floor)


@dataclass
class FitTrace:
    """Objective history of one fit.

    ``objectives[0]`` is the initial negative log likelihood and every later
    entry an accepted iterate.  ``attempts`` records every trial step as
    ``(step_size, objective, accepted)``.
    """

    objectives: list = field(default_factory=list)
    attempts: list = field(default_factory=list)
    final_step: float = float("nan")
    converged: bool = False
    stalled: bool = False

    @property
    def n_iterations(self) -> int:
        return max(len(self.objectives) - 1, 0)

    @property
    def accepted(self) -> list:
        return [a[2] for a in self.attempts]

    @property
    def final_objective(self) -> float:
        return self.objectives[-1]

    def write(self, stream) -> None:
        stream.write("attempt\tstep\tobjective\taccepted\n")
        for k, (step, obj, ok) in enumerate(self.attempts):
            stream.write(f"{k}\t{step:.17g}\t{obj:.17g}\t{int(ok)}\n")


def _lookup(mat: ColumnStochasticMatrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Vectorised ``mat[rows, cols]`` with zeros off the support."""
    n = mat.n
    mkey = mat.cols * n + mat.rows
    qkey = cols * n + rows
    pos = np.searchsorted(mkey, qkey)
    pos = np.minimum(pos, max(mkey.size - 1, 0))
    out = np.zeros(qkey.size)
    if mkey.size:
        hit = mkey[pos] == qkey
        out[hit] = mat.values[pos[hit]]
    return out


def _sparse_mixture(model: RhompModel, history: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    hist = [int(h) for h in history]
    if len(hist) != model.order:
        if len(hist) > model.order:
            raise ValueError(f"history of length {len(hist)} exceeds order {model.order}")
        raise ValueError(f"history of length {len(hist)} is shorter than order {model.order}; "
                         "use the lower-order cascade member")
    for h in hist:
        if not 0 <= h < model.n_states:
            raise ValueError(f"unknown state index {h}")
    idx, val, mass = [], [], 0.0
    for a, mat, h in zip(model.weights, model.matrices, hist):
        rows, vals = mat.column(h)
        if rows.size and a > 0:
            idx.append(rows)
            val.append(a * vals)
            mass += a
    if not idx:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    states, inv = np.unique(np.concatenate(idx), return_inverse=True)
    probs = np.bincount(inv, weights=np.concatenate(val), minlength=states.size) / mass
    return states, probs


def transition_distribution(model: RhompModel, history: Sequence[int]) -> np.ndarray:
    """Dense next-state distribution for a full-length history (most recent first).

    Slots whose column is empty (the state never occupied that slot in the
    training data) are dropped and the remaining weights renormalised; if
    every slot is empty the result is all zeros.
    """
    states, probs = _sparse_mixture(model, history)
    out = np.zeros(model.n_states)
    out[states] = probs
    return out


def predict_topk(model, history: Sequence[int], k: int) -> list[tuple[int, float]]:
    """Top-``k`` states by probability, ties broken by ascending state index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    states, probs = model.predict(history)
    keep = probs > 0
    states, probs = states[keep], probs[keep]
    order = np.lexsort((states, -probs))[:k]
    return [(int(states[o]), float(probs[o])) for o in order]


class _Problem:
    """Precomputed index structure for one ``(counts, weights)`` fit.

    Every slot's support is the set of observed ``(i, j_r)`` pairs.  Each
    count entry ``e`` points at its pair in every slot, so the objective and
    the gradients are single passes over the entries.
    """

    def __init__(self, counts: TransitionCounts, weights: np.ndarray, floor: float):
        m = weights.size
        if counts.order < m:
            raise ValueError(f"counts of order {counts.order} cannot fit an order-{m} model")
        keys, c = counts.table(m)
        if c.size == 0:
            raise ValueError("no order-%d transitions to fit" % m)
        self.n = n = counts.n_states
        self.weights = weights
        self.floor = floor
        self.c = c.astype(np.float64)
        self.templates = []
        self.pos = []
        for r in range(1, m + 1):
            pair = keys[:, r] * n + keys[:, 0]
            uniq, inv = np.unique(pair, return_inverse=True)
            self.templates.append(ColumnStochasticMatrix(n, uniq % n, uniq // n,
                                                         np.zeros(uniq.size), check=False))
            self.pos.append(inv.reshape(-1))

    def initial_values(self) -> list[np.ndarray]:
        vals = []
        for tmpl, pos in zip(self.templates, self.pos):
            v = np.bincount(pos, weights=self.c, minlength=tmpl.nnz)
            tot = np.bincount(tmpl.cols, weights=v, minlength=self.n)
            vals.append(v / tot[tmpl.cols])
        return vals

    def values_from_model(self, model: RhompModel) -> list[np.ndarray]:
        out = []
        for tmpl, mat in zip(self.templates, model.matrices):
            raw = _lookup(mat, tmpl.rows, tmpl.cols)
            # columns with no mass on the support restart from uniform
            tot = np.bincount(tmpl.cols, weights=raw, minlength=self.n)
            dead = tot[tmpl.cols] <= 0
            raw[dead] = 1.0
            out.append(project_segments(raw, tmpl.indptr))
        return out

    def probabilities(self, vals: list[np.ndarray]) -> np.ndarray:
        p = np.zeros(self.c.size)
        for a, v, pos in zip(self.weights, vals, self.pos):
            if a > 0:
                p += a * v[pos]
        return p

    def objective(self, vals: list[np.ndarray]) -> float:
        """Negative log likelihood; ``inf`` once an observed transition drops below the floor."""
        p = self.probabilities(vals)
        if p.min() < self.floor:
            return math.inf
        return float(-np.dot(self.c, np.log(p)))

    def gradient(self, vals: list[np.ndarray]) -> list[np.ndarray]:
        ratio = self.c / np.maximum(self.probabilities(vals), self.floor)
        return [np.bincount(pos, weights=-a * ratio, minlength=tmpl.nnz) if a > 0
                else np.zeros(tmpl.nnz)
                for a, tmpl, pos in zip(self.weights, self.templates, self.pos)]

    def project(self, vals: list[np.ndarray]) -> list[np.ndarray]:
        return [project_segments(v, t.indptr) for v, t in zip(vals, self.templates)]

    def step(self, vals, grads, gamma) -> list[np.ndarray]:
        return self.project([v - gamma * g for v, g in zip(vals, grads)])

    def stationarity(self, vals, grads) -> float:
        """Max-norm of ``x - P(x - g/|g|)``, zero exactly at a KKT point."""
        worst = 0.0
        for v, g, t in zip(vals, grads, self.templates):
            scale = np.abs(g).max() if g.size else 0.0
            if scale > 0:
                worst = max(worst, float(np.abs(v - project_segments(v - g / scale, t.indptr)).max()))
        return worst

    def model(self, vals: list[np.ndarray]) -> RhompModel:
        return RhompModel(self.weights, [t.with_values(v) for t, v in zip(self.templates, vals)])


def _problem(counts: TransitionCounts, weights, floor: float) -> _Problem:
    return _Problem(counts, _check_weights(weights), floor)


def log_likelihood(model: RhompModel, counts: TransitionCounts,
                   probability_floor: float = 1e-12) -> float:
    """Count-weighted log likelihood of the order-``m`` transitions in ``counts``."""
    m = model.order
    if counts.n_states != model.n_states:
        raise ValueError("counts and model disagree on the number of states")
    if counts.order < m:
        raise ValueError(f"counts of order {counts.order} lack order-{m} transitions")
    keys, c = counts.table(m)
    p = np.zeros(c.size)
    for r, (a, mat) in enumerate(zip(model.weights, model.matrices), start=1):
        if a > 0:
            p += a * _lookup(mat, keys[:, 0], keys[:, r])
    return float(np.dot(c, np.log(np.maximum(p, probability_floor))))


def gradients(model: RhompModel, counts: TransitionCounts,
              probability_floor: float = 1e-12) -> list[sp.csc_matrix]:
    """Gradients of the negative log likelihood w.r.t. every slot matrix.

    Entry ``(i, h)`` of the slot-``r`` gradient is
    ``-alpha_r * sum c(i, ctx) / p(i | ctx)`` over contexts with ``ctx_r = h``;
    the pattern is the set of observed ``(i, ctx_r)`` pairs.
    """
    m = model.order
    if counts.n_states != model.n_states:
        raise ValueError("counts and model disagree on the number of states")
    keys, c = counts.table(m)
    p = np.zeros(c.size)
    for r, (a, mat) in enumerate(zip(model.weights, model.matrices), start=1):
        p += a * _lookup(mat, keys[:, 0], keys[:, r])
    ratio = c / np.maximum(p, probability_floor)
    n = model.n_states
    out = []
    for r, a in enumerate(model.weights, start=1):
        g = sp.coo_matrix((-a * ratio, (keys[:, 0], keys[:, r])), shape=(n, n)).tocsc()
        g.sum_duplicates()
        out.append(g)
    return out


def random_initial_model(counts: TransitionCounts, weights, seed: int = 0) -> RhompModel:
    """Random feasible point on the observed-pair support."""
    prob = _problem(counts, weights, 1e-12)
    rng = np.random.default_rng(seed)
    vals = []
    for t in prob.templates:
        raw = rng.uniform(0.05, 1.0, size=t.nnz)
        tot = np.bincount(t.cols, weights=raw, minlength=prob.n)
        vals.append(raw / tot[t.cols])
    return prob.model(vals)


def _run(prob: _Problem, vals: list[np.ndarray], config: TrainerConfig) -> tuple[list, FitTrace]:
    trace = FitTrace()
    f = prob.objective(vals)
    trace.objectives.append(f)
    gamma = config.initial_step
    for _ in range(config.max_iterations):
        grads = prob.gradient(vals)
        while True:
            cand = prob.step(vals, grads, gamma)
            f_new = prob.objective(cand)
            ok = f_new < f
            trace.attempts.append((gamma, f_new, ok))
            if ok:
                gamma = min(2.0 * gamma, config.initial_step)
                break
            # rejected: retry the same iteration from the pre-step point
            gamma *= 0.5
            if gamma < MIN_STEP:
                break
        if gamma < MIN_STEP:
            residual = prob.stationarity(vals, grads)
            if residual <= 1e-8:
                trace.converged = True
            else:
                trace.stalled = True
                log.warning("step size underflow with stationarity residual %.3g", residual)
            break
        if not math.isfinite(f):
            improvement = math.inf
        else:
            improvement = (f - f_new) / abs(f) if f != 0 else 0.0
        vals, f = cand, f_new
        trace.objectives.append(f)
        if improvement < config.tolerance:
            trace.converged = True
            break
    trace.final_step = gamma
    return vals, trace


def fit_fixed_weights(counts: TransitionCounts, weights, config: TrainerConfig | None = None,
                      init: RhompModel | None = None) -> tuple[RhompModel, FitTrace]:
    """Maximum-likelihood slot matrices for fixed slot weights.

    Starts from the per-slot marginal MLE (or ``init`` restricted to the
    observed support), then alternates a gradient step on every matrix with
    a column-wise simplex projection.  A step that does not lower the
    objective is undone and retried with half the step size; an accepted
    step doubles it, capped at ``config.initial_step``.  Stops when the
    relative objective improvement drops below ``config.tolerance``.
    """
    config = config or TrainerConfig()
    prob = _problem(counts, weights, config.probability_floor)
    vals = prob.initial_values() if init is None else prob.values_from_model(init)
    vals, trace = _run(prob, vals, config)
    return prob.model(vals), trace


def chebyshev_nodes(n: int) -> np.ndarray:
    """``1/2 + 1/2 cos((2k - 1) pi / (2n))`` for ``k = 1..n`` (descending)."""
    k = np.arange(1, n + 1)
    return 0.5 + 0.5 * np.cos((2 * k - 1) * np.pi / (2 * n))


def minimize_interpolant(x, y) -> tuple[float, Chebyshev]:
    """Global minimiser of the polynomial interpolant through ``(x, y)`` on ``[min x, max x]``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    poly = Chebyshev.fit(x, y, deg=x.size - 1, domain=[lo, hi])
    cands = [lo, hi]
    for root in poly.deriv().roots():
        if abs(root.imag) <= 1e-9 and lo <= root.real <= hi:
            cands.append(float(root.real))
    cands = np.array(cands)
    best = cands[np.argmin(poly(cands))]
    return float(best), poly


@dataclass
class AlphaSelection:
    alpha: float
    model: RhompModel
    trace: FitTrace
    nodes: np.ndarray
    objectives: np.ndarray
    interpolant: Chebyshev

    def __iter__(self):
        return iter((self.alpha, self.model))


def select_alpha(counts: TransitionCounts, n_nodes: int = 15, config: TrainerConfig | None = None,
                 threads: int = 1) -> AlphaSelection:
    """Pick the second-order weight by interpolating the fitted objective.

    Trains at ``n_nodes`` Chebyshev nodes in ``(0, 1)`` with a tolerance
    relaxed tenfold, interpolates the final negative log likelihoods with a
    degree ``n_nodes - 1`` polynomial, takes its global minimum between the
    extreme nodes and retrains there at full tolerance.
    """
    if n_nodes < 3:
        raise ValueError("n_nodes must be >= 3")
    config = config or TrainerConfig()
    probe = config.relaxed(10.0)
    nodes = chebyshev_nodes(n_nodes)

    def objective_at(a: float) -> float:
        model, trace = fit_fixed_weights(counts, [a, 1.0 - a], probe)
        return trace.final_objective

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            objs = np.array(list(pool.map(objective_at, nodes)))
    else:
        objs = np.array([objective_at(a) for a in nodes])
    alpha, poly = minimize_interpolant(nodes, objs)
    model, trace = fit_fixed_weights(counts, [alpha, 1.0 - alpha], config)
    return AlphaSelection(alpha, model, trace, nodes, objs, poly)


def weights_from_beta(beta: float, m: int) -> np.ndarray:
    """Truncated-geometric slot weights ``beta^(r-1) (1 - beta) / (1 - beta^m)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if beta == 0.0:
        w = np.zeros(m)
        w[0] = 1.0
        return w
    w = beta ** np.arange(m) * (1.0 - beta) / (1.0 - beta ** m)
    # absorb rounding so the correctly rounded sum is exactly one
    w[0] = 1.0 - math.fsum(w[1:])
    while (total := math.fsum(w)) != 1.0:
        w[0] = np.nextafter(w[0], 2.0 if total < 1.0 else -1.0)
    return w


def beta_from_alpha(alpha: float) -> float:
    """Decay rate whose two-slot weights are ``(alpha, 1 - alpha)``."""
    if not 0.5 < alpha <= 1.0:
        raise ValueError(f"alpha={alpha} <= 1/2 would need beta >= 1; choose beta explicitly")
    return (1.0 - alpha) / alpha


@dataclass
class StationaryResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    cesaro: bool
    irreducible: bool


def stationary_distribution(model: RhompModel, tolerance: float = 1e-10,
                            max_iterations: int = 100_000) -> StationaryResult:
    """Long-run occupation ``x = P x`` of ``P = sum_r alpha_r R[r]`` by power iteration.

    Starts from the uniform distribution and stops once successive iterates
    differ by at most ``tolerance`` in 1-norm.  If that never happens (a
    periodic chain) the Cesaro mean of all iterates is returned instead and
    ``cesaro`` is set.
    """
    P = model.transition_matrix()
    n = model.n_states
    empty = np.flatnonzero(np.asarray(P.sum(axis=0)).ravel() <= 0)
    if empty.size:
        warnings.warn(f"{empty.size} states have no outgoing transitions; treated as absorbing")
        P = sp.csc_matrix(P + sp.csc_matrix((np.ones(empty.size), (empty, empty)), shape=(n, n)))
    n_comp, _ = connected_components(P, directed=True, connection="strong")
    irreducible = n_comp == 1
    if not irreducible:
        warnings.warn("aggregate chain is reducible; stationary distribution may not be unique")
    x = np.full(n, 1.0 / n)
    running = x.copy()
    for it in range(1, max_iterations + 1):
        y = P @ x
        y /= y.sum()
        running += y
        if np.abs(y - x).sum() <= tolerance:
            res = float(np.abs(P @ y - y).sum())
            return StationaryResult(y, res, it, True, False, irreducible)
        x = y
    avg = running / (max_iterations + 1)
    avg /= avg.sum()
    res = float(np.abs(P @ avg - avg).sum())
    return StationaryResult(avg, res, max_iterations, res <= tolerance, True, irreducible)


def sample_trail(model: RhompModel, length: int, seed: int, warm_start: Sequence[int]) -> np.ndarray:
    """Simulate the two-stage process.

    ``warm_start`` holds ``m`` states in chronological order (oldest first)
    and forms the start of the returned trail, which has ``length`` states in
    total.  Each new state picks slot ``r`` with probability ``alpha_r`` and
    then draws from column ``history[r]`` of that slot's matrix.
    """
    m = model.order
    warm = [int(s) for s in warm_start]
    if len(warm) != m:
        raise ValueError(f"warm_start needs exactly {m} states")
    if any(not 0 <= s < model.n_states for s in warm):
        raise ValueError("warm_start contains an unknown state")
    if length < m:
        raise ValueError("length must be at least the model order")
    steps = length - m
    rng = np.random.default_rng(seed)
    u_slot = rng.random(steps).tolist()
    u_state = rng.random(steps).tolist()
    slot_cdf = np.cumsum(model.weights).tolist()
    slot_cdf[-1] = 1.0
    tables = []
    for mat in model.matrices:
        cum = np.zeros(mat.nnz)
        for j in mat.nonempty_columns():
            lo, hi = mat.indptr[j], mat.indptr[j + 1]
            cum[lo:hi] = np.cumsum(mat.values[lo:hi])
        tables.append((mat.indptr.tolist(), mat.rows.tolist(), cum.tolist()))
    trail = warm[:]
    for t in range(steps):
        r = bisect.bisect_right(slot_cdf, u_slot[t])
        r = min(r, m - 1)
        j = trail[-1 - r]
        indptr, rows, cum = tables[r]
        lo, hi = indptr[j], indptr[j + 1]
        if lo == hi:
            raise SamplingError(f"slot {r + 1} has no transitions out of state {j}")
        k = bisect.bisect_right(cum, u_state[t] * cum[hi - 1], lo, hi)
        trail.append(rows[min(k, hi - 1)])
    return np.asarray(trail, dtype=np.int64)


def normalize_factor_pair(r_tilde, q_tilde, alpha_tilde: float,
                          atol: float = 1e-9) -> tuple[float, ColumnStochasticMatrix, ColumnStochasticMatrix]:
    """Turn a nonnegative pair ``(alpha~ R~ + (1 - alpha~) Q~)`` into RHOMP form.

    Requires every column of ``r_tilde`` to sum to the same ``r~`` and every
    column of ``q_tilde`` to the same ``q~`` with
    ``alpha~ r~ + (1 - alpha~) q~ = 1``.  Returns ``alpha = alpha~ r~`` and
    the column-normalised matrices; the mixture is unchanged entrywise.  A
    factor with zero mass gets weight zero and a uniform matrix.
    """
    R = sp.csc_matrix(r_tilde, dtype=np.float64)
    Q = sp.csc_matrix(q_tilde, dtype=np.float64)
    if R.shape != Q.shape or R.shape[0] != R.shape[1]:
        raise ValueError("factors must be square and of equal shape")
    if (R.data < 0).any() or (Q.data < 0).any():
        raise ValueError("factors must be nonnegative")
    if not 0.0 <= alpha_tilde <= 1.0:
        raise ValueError("alpha_tilde must lie in [0, 1]")
    rs = np.asarray(R.sum(axis=0)).ravel()
    qs = np.asarray(Q.sum(axis=0)).ravel()
    if np.ptp(rs) > atol or np.ptp(qs) > atol:
        raise ValueError("column sums of each factor must be equal")
    r, q = float(rs.mean()), float(qs.mean())
    if abs(alpha_tilde * r + (1.0 - alpha_tilde) * q - 1.0) > atol:
        raise ValueError("alpha~ r~ + (1 - alpha~) q~ must equal 1")
    n = R.shape[0]

    def normalized(M, s):
        if s <= 0:
            full = np.full((n, n), 1.0 / n)
            return ColumnStochasticMatrix.from_dense(full)
        coo = (M / s).tocoo()
        return ColumnStochasticMatrix(n, coo.row, coo.col, coo.data)

    alpha = alpha_tilde * r
    if r <= 0:
        alpha = 0.0
    elif q <= 0:
        alpha = 1.0
    return float(min(max(alpha, 0.0), 1.0)), normalized(R, r), normalized(Q, q)

"""Text model files.

RHOMP::

    rhomp<TAB>order=m<TAB>N=<N>
    alpha<TAB>a1<TAB>...<TAB>am
    matrix<TAB>1
    col<TAB>row<TAB>value
    ...
    matrix<TAB>m
    ...

Markov chain and Kneser-Ney models are stored as the counts they were fit
from (``mc`` / ``kneser`` header, ``discount`` line for Kneser-Ney) in
level-tagged blocks: ``level<TAB>0`` holds ``state<TAB>count`` rows, and
``level<TAB>r`` holds ``i<TAB>j1..jr<TAB>count`` rows.  Floats are written
with 17 significant digits so a write/read/write cycle is byte-identical.
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path
from typing import TextIO

import numpy as np

from .baselines import KneserNeyModel, MarkovModel
from .corpus import StateSpace, TransitionCounts
from .model import RhompModel
from .stochastic import ColumnStochasticMatrix

__all__ = ["ModelFileError", "dump_model", "load_model", "dumps_model", "loads_model",
           "write_states", "read_states", "atomic_write"]


class ModelFileError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _header(kind: str, order: int, n: int) -> str:
    return f"{kind}\torder={order}\tN={n}\n"


def dump_model(model, stream: TextIO) -> None:
    if isinstance(model, RhompModel):
        stream.write(_header("rhomp", model.order, model.n_states))
        stream.write("alpha\t" + "\t".join(_fmt(a) for a in model.weights) + "\n")
        for r, mat in enumerate(model.matrices, start=1):
            stream.write(f"matrix\t{r}\n")
            mat.export(stream)
    elif isinstance(model, (MarkovModel, KneserNeyModel)):
        kind = "mc" if isinstance(model, MarkovModel) else "kneser"
        counts = model.counts
        stream.write(_header(kind, model.order, model.n_states))
        if kind == "kneser":
            stream.write("discount\t" + "\t".join(_fmt(d) for d in model.discounts) + "\n")
        stream.write("level\t0\n")
        for s in np.flatnonzero(counts.state_counts).tolist():
            stream.write(f"{s}\t{int(counts.state_counts[s])}\n")
        for r in range(1, model.order + 1):
            stream.write(f"level\t{r}\n")
            keys, c = counts.table(r)
            for k, v in zip(keys.tolist(), c.tolist()):
                stream.write("\t".join(map(str, k)) + f"\t{v}\n")
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")


def dumps_model(model) -> str:
    buf = io.StringIO()
    dump_model(model, buf)
    return buf.getvalue()


def _parse_header(line: str) -> tuple[str, int, int]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 3 or not parts[1].startswith("order=") or not parts[2].startswith("N="):
        raise ModelFileError(f"bad header line {line.strip()!r}")
    try:
        order, n = int(parts[1][6:]), int(parts[2][2:])
    except ValueError as exc:
        raise ModelFileError(f"bad header line {line.strip()!r}") from exc
    if order < 1 or n < 1:
        raise ModelFileError("order and N must be positive")
    return parts[0], order, n


def _blocks(lines: list[str], tag: str) -> dict[int, list[list[str]]]:
    out: dict[int, list[list[str]]] = {}
    cur = None
    for lineno, line in lines:
        parts = line.split("\t")
        if parts[0] == tag and len(parts) == 2:
            try:
                cur = int(parts[1])
            except ValueError as exc:
                raise ModelFileError(f"line {lineno}: bad {tag} tag") from exc
            if cur in out:
                raise ModelFileError(f"line {lineno}: duplicate {tag} {cur}")
            out[cur] = []
        elif cur is None:
            raise ModelFileError(f"line {lineno}: data before first {tag} block")
        else:
            out[cur].append((lineno, parts))
    return out


def _load_rhomp(order: int, n: int, lines) -> RhompModel:
    if not lines or not lines[0][1].startswith("alpha\t"):
        raise ModelFileError("missing alpha line")
    try:
        weights = [float(x) for x in lines[0][1].split("\t")[1:]]
    except ValueError as exc:
        raise ModelFileError("non-numeric weight") from exc
    if len(weights) != order:
        raise ModelFileError(f"expected {order} weights, found {len(weights)}")
    blocks = _blocks(lines[1:], "matrix")
    if sorted(blocks) != list(range(1, order + 1)):
        raise ModelFileError(f"expected matrix blocks 1..{order}")
    mats = []
    for r in range(1, order + 1):
        rows, cols, vals = [], [], []
        for lineno, parts in blocks[r]:
            if len(parts) != 3:
                raise ModelFileError(f"line {lineno}: expected col, row, value")
            try:
                cols.append(int(parts[0]))
                rows.append(int(parts[1]))
                vals.append(float(parts[2]))
            except ValueError as exc:
                raise ModelFileError(f"line {lineno}: malformed triplet") from exc
        try:
            mats.append(ColumnStochasticMatrix(n, rows, cols, vals))
        except ValueError as exc:
            raise ModelFileError(f"matrix {r}: {exc}") from exc
    try:
        model = RhompModel(weights, mats)
    except ValueError as exc:
        raise ModelFileError(str(exc)) from exc
    return model


def _load_counts_model(kind: str, order: int, n: int, lines):
    discounts = None
    if kind == "kneser":
        if not lines or not lines[0][1].startswith("discount\t"):
            raise ModelFileError("missing discount line")
        try:
            discounts = [float(x) for x in lines[0][1].split("\t")[1:]]
        except ValueError as exc:
            raise ModelFileError("non-numeric discount") from exc
        lines = lines[1:]
    blocks = _blocks(lines, "level")
    if sorted(blocks) != list(range(0, order + 1)):
        raise ModelFileError(f"expected level blocks 0..{order}")
    sc = np.zeros(n, dtype=np.int64)
    try:
        for lineno, parts in blocks[0]:
            if len(parts) != 2:
                raise ModelFileError(f"line {lineno}: expected state, count")
            state = int(parts[0])
            if not 0 <= state < n:
                raise ModelFileError(f"line {lineno}: state {state} out of range")
            sc[state] = int(parts[1])
        tables = []
        for r in range(1, order + 1):
            rows = blocks[r]
            if any(len(p) != r + 2 for _, p in rows):
                raise ModelFileError(f"level {r}: rows must have {r + 2} fields")
            arr = np.array([[int(x) for x in p] for _, p in rows], dtype=np.int64).reshape(-1, r + 2)
            tables.append((arr[:, :-1], arr[:, -1]))
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"malformed count row: {exc}") from exc
    try:
        counts = TransitionCounts(order, n, tables, sc)
    except ValueError as exc:
        raise ModelFileError(str(exc)) from exc
    if kind == "mc":
        return MarkovModel(counts, order)
    model = KneserNeyModel(counts, order)
    if len(discounts) != order or not np.allclose(discounts, model.discounts, rtol=0, atol=1e-12):
        raise ModelFileError("stored discounts disagree with the stored counts")
    return model


def load_model(stream: TextIO):
    """Read any model file, validating every invariant of the model type."""
    raw = stream.read().splitlines()
    if not raw:
        raise ModelFileError("empty model file")
    kind, order, n = _parse_header(raw[0])
    lines = [(i, line) for i, line in enumerate(raw[1:], start=2) if line]
    if kind == "rhomp":
        return _load_rhomp(order, n, lines)
    if kind in ("mc", "kneser"):
        return _load_counts_model(kind, order, n, lines)
    raise ModelFileError(f"unknown model kind {kind!r}")


def loads_model(text: str):
    return load_model(io.StringIO(text))


def write_states(stream: TextIO, space: StateSpace) -> None:
    for tok in space.tokens:
        stream.write(f"{tok}\n")


def read_states(stream: TextIO) -> StateSpace:
    return StateSpace(tuple(line.rstrip("\n") for line in stream if line.rstrip("\n")))


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

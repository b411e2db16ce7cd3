"""Labelled (padded adjacency, p, label) datasets: generation, JSONL I/O, splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Sequence

import numpy as np

from ._parallel import parallel_map
from .efficiency import HorizonError, SimulationParams, label
from .graphs import WalkSetup, adjacency_matrix, pad_matrix
from .dynamics import IntegrationError

DEFAULT_N_MAX = 14
HEADER_PREFIX = "# "


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass(frozen=True)
class LabeledExample:
    graph_kind: str
    n: int
    A: np.ndarray  # N_max x N_max, zero outside the top-left n x n block
    p: float
    label: int
    t_quantum: float | None = None
    t_classical: float | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledExample):
            return NotImplemented
        return (
            (self.graph_kind, self.n, self.p, self.label, self.t_quantum, self.t_classical)
            == (other.graph_kind, other.n, other.p, other.label, other.t_quantum, other.t_classical)
            and np.array_equal(self.A, other.A)
        )

    def to_record(self) -> dict:
        return {
            "graph": self.graph_kind,
            "n": self.n,
            "p": self.p,
            "label": self.label,
            "t_q": self.t_quantum,
            "t_c": self.t_classical,
            "A": [[int(x) if float(x).is_integer() else float(x) for x in row] for row in self.A],
        }


@dataclass
class Dataset:
    examples: list[LabeledExample]
    n_max: int = DEFAULT_N_MAX
    seed: int = 0
    params: SimulationParams = field(default_factory=SimulationParams)
    failures: list[dict] = field(default_factory=list, compare=False)

    def __len__(self) -> int:
        return len(self.examples)

    def kinds(self) -> list[str]:
        return sorted({ex.graph_kind for ex in self.examples})

    def meta(self) -> dict:
        return {"n_max": self.n_max, "seed": self.seed, "params": self.params.to_dict()}

    def report(self) -> dict:
        counts: dict[str, int] = {}
        for ex in self.examples:
            counts[ex.graph_kind] = counts.get(ex.graph_kind, 0) + 1
        return {
            "examples": len(self.examples),
            "per_graph": dict(sorted(counts.items())),
            "positive": int(sum(ex.label for ex in self.examples)),
            "failures": self.failures,
        }


def _label_one(params: SimulationParams, n_max: int, job: tuple[WalkSetup, float]):
    setup, p = job
    try:
        out = label(setup, p, params)
    except (HorizonError, IntegrationError) as exc:
        return {"graph": setup.kind, "p": p, "error": str(exc)}
    A = pad_matrix(adjacency_matrix(setup.graph), n_max)
    return LabeledExample(setup.kind, setup.n, A, p, out.label, out.t_quantum, out.t_classical)


def generate(
    setups: Sequence[WalkSetup],
    samples_per_graph: int,
    seed: int,
    params: SimulationParams = SimulationParams(),
    n_max: int = DEFAULT_N_MAX,
    workers: int = 1,
) -> Dataset:
    """Label ``samples_per_graph`` uniform draws of p for every setup.

    Draws come from one seeded generator consumed setup by setup, so the
    dataset depends only on the arguments. Examples are sorted by graph
    kind, then p. Failed labellings are skipped and listed in ``failures``.
    """
    if samples_per_graph < 1:
        raise ValueError("samples_per_graph must be >= 1")
    rng = np.random.default_rng(seed)
    jobs = []
    for setup in setups:
        for p in rng.uniform(0.0, 1.0, size=samples_per_graph):
            jobs.append((setup, float(p)))
    results = parallel_map(partial(_label_one, params, n_max), jobs, workers)
    examples = [r for r in results if isinstance(r, LabeledExample)]
    failures = [r for r in results if not isinstance(r, LabeledExample)]
    examples.sort(key=lambda ex: (ex.graph_kind, ex.p))
    return Dataset(examples, n_max, seed, params, failures)


def split_exclude(ds: Dataset, excluded_kind: str) -> tuple[Dataset, Dataset]:
    train = [ex for ex in ds.examples if ex.graph_kind != excluded_kind]
    test = [ex for ex in ds.examples if ex.graph_kind == excluded_kind]
    return replace(ds, examples=train, failures=[]), replace(ds, examples=test, failures=[])


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def save(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(HEADER_PREFIX + json.dumps(ds.meta(), sort_keys=True) + "\n")
        for ex in ds.examples:
            fh.write(json.dumps(ex.to_record(), separators=(",", ":")) + "\n")


def _opt_float(rec: dict, key: str):
    v = rec.get(key)
    return None if v is None else float(v)


def load(path) -> Dataset:
    meta = None
    examples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if meta is not None:
                    raise DatasetFormatError(path, lineno, "duplicate metadata header")
                try:
                    meta = json.loads(line[1:])
                except json.JSONDecodeError as exc:
                    raise DatasetFormatError(path, lineno, f"bad metadata header: {exc}") from None
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(path, lineno, f"invalid JSON: {exc}") from None
            examples.append(_parse_record(rec, path, lineno, meta))
    if meta is None:
        raise DatasetFormatError(path, 1, "missing metadata header")
    try:
        params = SimulationParams(**meta["params"])
        return Dataset(examples, int(meta["n_max"]), int(meta["seed"]), params)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(path, 1, f"bad metadata header: {exc}") from None


def _parse_record(rec, path, lineno: int, meta) -> LabeledExample:
    if meta is None:
        raise DatasetFormatError(path, lineno, "example before metadata header")
    if not isinstance(rec, dict):
        raise DatasetFormatError(path, lineno, "record is not a JSON object")
    for key in ("graph", "n", "p", "label", "A"):
        if key not in rec:
            raise DatasetFormatError(path, lineno, f"missing field {key!r}")
    try:
        A = np.array(rec["A"], dtype=float)
        n, p, lab = int(rec["n"]), float(rec["p"]), int(rec["label"])
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(path, lineno, f"bad field value: {exc}") from None
    n_max = int(meta["n_max"])
    if A.shape != (n_max, n_max):
        raise DatasetFormatError(path, lineno, f"A has shape {A.shape}, expected ({n_max}, {n_max})")
    if lab not in (0, 1) or not (0.0 <= p <= 1.0) or not math.isfinite(p):
        raise DatasetFormatError(path, lineno, "label must be 0/1 and p in [0, 1]")
    if np.any(A[n:, :]) or np.any(A[:, n:]):
        raise DatasetFormatError(path, lineno, "A is nonzero outside its n x n block")
    return LabeledExample(
        str(rec["graph"]), n, A, p, lab, _opt_float(rec, "t_q"), _opt_float(rec, "t_c")
    )

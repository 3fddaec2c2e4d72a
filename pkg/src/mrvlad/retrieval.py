"""Exhaustive nearest-neighbor retrieval and Recall@N evaluation.

Everything is exact: queries are ranked by Euclidean distance against the
full database matrix, ties broken by ascending id, and a query counts as
correct at N when any of its top-N retrievals lies within the localization
radius of the query position. Queries with no in-radius ground truth are
excluded from the denominator and reported.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, DuplicateIdError, EmptyEvaluationError

DEFAULT_NS = (1, 5, 20)


@dataclass
class DescriptorIndex:
    """Immutable matrix of database descriptors; safe for concurrent queries."""

    matrix: np.ndarray  # (N, dim) float32
    ids: tuple
    tie_rank: np.ndarray  # rank of each row in ascending-id order

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def build_index(descriptors, ids) -> DescriptorIndex:
    ids = tuple(str(i) for i in ids)
    if len(ids) == 0:
        raise ContractViolationError("cannot build an empty index")
    if len(set(ids)) != len(ids):
        seen, dup = set(), set()
        for i in ids:
            (dup if i in seen else seen).add(i)
        raise DuplicateIdError(f"duplicate descriptor ids: {sorted(dup)}")
    rows = [np.asarray(d, dtype=np.float32).reshape(-1) for d in descriptors]
    if len(rows) != len(ids):
        raise ContractViolationError(f"{len(rows)} descriptors for {len(ids)} ids")
    dim = rows[0].shape[0]
    for i, r in enumerate(rows):
        if r.shape[0] != dim:
            raise ContractViolationError(
                f"row {i} (id {ids[i]}) has dimension {r.shape[0]}, expected {dim}"
            )
    matrix = np.vstack(rows)
    tie_rank = np.empty(len(ids), dtype=np.int64)
    tie_rank[np.argsort(np.array(ids))] = np.arange(len(ids))
    matrix.setflags(write=False)
    return DescriptorIndex(matrix=matrix, ids=ids, tie_rank=tie_rank)


def query_top_n(index: DescriptorIndex, q: np.ndarray, n: int):
    """Exact top-n ids and distances; equidistant rows come lowest-id first."""
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    if q.shape[0] != index.dim:
        raise ContractViolationError(f"query dimension {q.shape[0]} != index {index.dim}")
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    truncated = n > len(index)
    n = min(n, len(index))
    diff = index.matrix.astype(np.float64) - q.astype(np.float64)
    d2 = np.einsum("nd,nd->n", diff, diff)
    order = np.lexsort((index.tie_rank, d2))[:n]
    ids = [index.ids[i] for i in order]
    return ids, np.sqrt(d2[order]), truncated


@dataclass
class RecallReport:
    recalls: dict  # N -> value in [0, 1]
    evaluated: int
    excluded_ids: list
    radius: float
    top_ids: dict  # query id -> list of top max(N) ids
    first_correct_rank: dict = field(default_factory=dict)  # query id -> 1-based or None

    def to_json(self) -> str:
        return json.dumps(
            {
                "radius_m": self.radius,
                "evaluated_queries": self.evaluated,
                "excluded_queries": self.excluded_ids,
                "recall_at": {str(n): v for n, v in sorted(self.recalls.items())},
            },
            indent=2,
        )

    def format_table(self) -> str:
        lines = [f"radius {self.radius:g} m | queries evaluated {self.evaluated} "
                 f"| excluded {len(self.excluded_ids)}"]
        header = " | ".join(f"R@{n:<4d}" for n in sorted(self.recalls))
        values = " | ".join(f"{self.recalls[n]*100:5.1f}" for n in sorted(self.recalls))
        lines.append(header)
        lines.append("-" * len(header))
        lines.append(values)
        return "\n".join(lines)

    def write_ranks_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_id", "first_correct_rank"])
            for qid in sorted(self.first_correct_rank):
                r = self.first_correct_rank[qid]
                w.writerow([qid, "" if r is None else r])


def evaluate_recall(index: DescriptorIndex, queries, db_positions: dict,
                    radius: float, ns=DEFAULT_NS) -> RecallReport:
    """Recall@N for ``queries`` = iterable of (id, descriptor, (x, y)).

    ``db_positions`` maps database id -> (x, y) meters. A query with no
    database record within ``radius`` is excluded and reported.
    """
    ns = tuple(sorted(set(int(n) for n in ns)))
    if not ns or ns[0] < 1:
        raise ContractViolationError(f"invalid N list {ns}")
    db_xy = np.array([db_positions[i] for i in index.ids], dtype=np.float64)

    max_n = min(max(ns), len(index))
    correct_at = {n: 0 for n in ns}
    evaluated = 0
    excluded = []
    top_ids = {}
    first_rank = {}
    for qid, desc, pos in queries:
        pos = np.asarray(pos, dtype=np.float64)
        in_radius = np.sqrt(np.sum((db_xy - pos) ** 2, axis=1)) <= radius
        if not np.any(in_radius):
            excluded.append(str(qid))
            continue
        evaluated += 1
        good = {index.ids[i] for i in np.nonzero(in_radius)[0]}
        ids, _, _ = query_top_n(index, desc, len(index))
        top_ids[str(qid)] = ids[:max_n]
        hit = next((r for r, i in enumerate(ids) if i in good), None)
        first_rank[str(qid)] = None if hit is None else hit + 1
        for n in ns:
            if hit is not None and hit < n:
                correct_at[n] += 1
    if evaluated == 0:
        raise EmptyEvaluationError(
            f"no query has a database record within {radius} m"
        )
    recalls = {n: correct_at[n] / evaluated for n in ns}
    return RecallReport(recalls=recalls, evaluated=evaluated, excluded_ids=excluded,
                        radius=radius, top_ids=top_ids, first_correct_rank=first_rank)

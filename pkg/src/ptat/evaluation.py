"""Retrieval metrics over the incremental protocol: recall@k in both
directions, per-step bookkeeping, the anti-forgetting ratio, and flat
JSONL/CSV export of everything a report needs.

Ranking is deterministic: ties resolve to the lower column index.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

DIRECTIONS = ("a2t", "t2a")
RECALL_KS = (1, 5, 10)

EXPORT_FIELDS = ("step", "dataset", "direction", "k", "recall",
                 "strategy", "seed", "trainable_params")


class UndefinedAfsError(ZeroDivisionError):
    """Anti-forgetting ratio with a zero recall at the introduction step."""


def recall_at_k(similarities: np.ndarray, k: int) -> float:
    """Fraction of rows whose true column (the diagonal) ranks in the top k.

    A column j outranks the truth at row i when its score is strictly
    larger, or equal with j < i; this makes ties deterministic.
    """
    c = np.asarray(similarities, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {c.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = c.shape[0]
    diag = np.diag(c)[:, None]
    stronger = (c > diag).sum(axis=1)
    idx = np.arange(n)
    tied_lower = ((c == diag) & (idx[None, :] < idx[:, None])).sum(axis=1)
    ranks = stronger + tied_lower
    return float((ranks < k).mean())


@dataclass(frozen=True)
class RetrievalScores:
    """All six recalls of one (model, dataset) evaluation."""

    values: Mapping[tuple[str, int], float]

    def __getitem__(self, key: tuple[str, int]) -> float:
        return self.values[key]


def scores_from_embeddings(e_audio: np.ndarray, e_text: np.ndarray) -> RetrievalScores:
    """Build one similarity matrix and read both directions off it."""
    if e_audio.shape != e_text.shape:
        raise ValueError(
            f"embedding shapes differ: {e_audio.shape} vs {e_text.shape}")
    if e_audio.shape[0] < 2:
        raise ValueError("retrieval evaluation needs at least 2 pairs")
    c = e_audio @ e_text.T  # audio queries on rows
    values = {}
    for k in RECALL_KS:
        values[("a2t", k)] = recall_at_k(c, k)
        values[("t2a", k)] = recall_at_k(c.T, k)
    return RetrievalScores(values)


def evaluate_retrieval(model, dataset) -> RetrievalScores:
    """Embed a test split with any model exposing ``embed_pairs`` and
    score retrieval in both directions."""
    e_audio, e_text = model.embed_pairs(dataset)
    return scores_from_embeddings(e_audio, e_text)


# ---------------------------------------------------------------------------
# History across the incremental protocol.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    step: int
    dataset: str
    direction: str
    k: int
    recall: float


class MetricsHistory:
    """Recall records per (step, dataset, direction, k), plus run identity."""

    def __init__(self, strategy: str, seed: int, trainable_params: int):
        self.strategy = strategy
        self.seed = seed
        self.trainable_params = trainable_params
        self.records: list[MetricsRecord] = []
        self._index: dict[tuple[int, str, str, int], float] = {}

    def add(self, step: int, dataset: str, direction: str, k: int, recall: float) -> None:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        key = (step, dataset, direction, k)
        if key in self._index:
            raise ValueError(f"duplicate metrics record for {key}")
        if not (0.0 <= recall <= 1.0):
            raise ValueError(f"recall out of [0,1]: {recall}")
        self.records.append(MetricsRecord(step, dataset, direction, k, recall))
        self._index[key] = recall

    def add_scores(self, step: int, dataset: str, scores: RetrievalScores) -> None:
        for (direction, k), value in sorted(scores.values.items()):
            self.add(step, dataset, direction, k, value)

    def get(self, step: int, dataset: str, direction: str, k: int) -> float:
        return self._index[(step, dataset, direction, k)]

    def has(self, step: int, dataset: str, direction: str, k: int) -> bool:
        return (step, dataset, direction, k) in self._index

    @property
    def final_step(self) -> int:
        return max(r.step for r in self.records)

    def datasets_at(self, step: int) -> list[str]:
        seen = []
        for r in self.records:
            if r.step == step and r.dataset not in seen:
                seen.append(r.dataset)
        return seen

    def first_seen_step(self, dataset: str) -> int:
        steps = [r.step for r in self.records if r.dataset == dataset]
        if not steps:
            raise KeyError(f"no records for dataset {dataset!r}")
        return min(steps)

    # -- export ------------------------------------------------------------

    def to_jsonl(self) -> str:
        lines = []
        for r in sorted(self.records,
                        key=lambda r: (r.step, r.dataset, r.direction, r.k)):
            row = {"step": r.step, "dataset": r.dataset, "direction": r.direction,
                   "k": r.k, "recall": r.recall, "strategy": self.strategy,
                   "seed": self.seed, "trainable_params": self.trainable_params}
            lines.append(json.dumps(row, sort_keys=False))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EXPORT_FIELDS)
        for r in sorted(self.records,
                        key=lambda r: (r.step, r.dataset, r.direction, r.k)):
            writer.writerow([r.step, r.dataset, r.direction, r.k, repr(r.recall),
                             self.strategy, self.seed, self.trainable_params])
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsHistory":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows:
            raise ValueError("empty metrics stream")
        first = rows[0]
        history = cls(first["strategy"], first["seed"], first["trainable_params"])
        for row in rows:
            history.add(row["step"], row["dataset"], row["direction"],
                        row["k"], row["recall"])
        return history


def anti_forgetting_score(history: MetricsHistory, dataset: str,
                          direction: str = "t2a", k: int = 10) -> float:
    """Final recall over first-seen recall; 1 means nothing was forgotten,
    above 1 is legal (later steps may help)."""
    m0 = history.first_seen_step(dataset)
    first = history.get(m0, dataset, direction, k)
    last = history.get(history.final_step, dataset, direction, k)
    if first == 0.0:
        raise UndefinedAfsError(
            f"recall@{k} for {dataset!r} at its introduction step is 0")
    return last / first


@dataclass(frozen=True)
class AfsReport:
    dataset: str
    first_seen_step: int
    recall_at_introduction: float
    recall_at_end: float
    score: float


def afs_report(history: MetricsHistory, direction: str = "t2a",
               k: int = 10) -> list[AfsReport]:
    reports = []
    for dataset in history.datasets_at(history.final_step):
        m0 = history.first_seen_step(dataset)
        first = history.get(m0, dataset, direction, k)
        last = history.get(history.final_step, dataset, direction, k)
        score = anti_forgetting_score(history, dataset, direction, k)
        reports.append(AfsReport(dataset, m0, first, last, score))
    return reports


def average_metrics(history: MetricsHistory) -> dict[tuple[str, int], float]:
    """Unweighted per-(direction, k) means across datasets at the final step."""
    step = history.final_step
    datasets = history.datasets_at(step)
    missing = [(step, d, direction, k)
               for d in datasets for direction in DIRECTIONS for k in RECALL_KS
               if not history.has(step, d, direction, k)]
    if missing:
        raise ValueError(f"incomplete final-step records; missing {missing}")
    out = {}
    for direction in DIRECTIONS:
        for k in RECALL_KS:
            vals = [history.get(step, d, direction, k) for d in datasets]
            out[(direction, k)] = float(np.mean(vals))
    return out

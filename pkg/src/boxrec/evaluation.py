"""All-item ranking, Recall/NDCG/MAP at k, and reports."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .datasets import SplitDataset, inference_history
from .encoder import EncoderConfig, encode_user, pad_window, point_view
from .errors import InvalidArgumentError
from .geometry import boxset_distance

DEFAULT_KS = (5, 10, 20, 30, 50)


@dataclass
class Model:
    """A trained encoder: config plus parameters (shared, never mutated here)."""

    config: EncoderConfig
    params: dict

    def point_baseline(self) -> "Model":
        return point_baseline(self)

    def encode(self, windows, batch_size=1024):
        """Eval-mode box sets for a stack of padded windows."""
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        out = []
        for start in range(0, len(windows), batch_size):
            boxes = encode_user(Graph(), windows[start:start + batch_size], self.config,
                                self.params, train=False)
            out.extend(boxes.to_boxsets())
        return out

    def item_matrix(self):
        """Item embeddings as float64, row ``i`` = internal item id ``i`` (row 0 is padding)."""
        return self.params["item_embeddings"].value.astype(np.float64)


def point_baseline(model: Model) -> Model:
    """Read-only view with offsets pinned at zero; parameters are shared, not copied."""
    return Model(point_view(model.config), model.params)


@dataclass
class RankingRow:
    user: int
    ranked: np.ndarray
    distances: np.ndarray
    relevant: set


def user_window(split: SplitDataset, user: int, L: int) -> np.ndarray:
    return pad_window(inference_history(split, user), L)


def rank_items(boxes, items: np.ndarray, candidates: np.ndarray, params):
    """Candidates ordered by ascending distance, ties broken by ascending id."""
    dist = boxset_distance(boxes, items[candidates], params)
    order = np.lexsort((candidates, dist))
    return candidates[order], dist[order]


def score_all(model: Model, split: SplitDataset, user: int, boxes=None, k=None) -> RankingRow:
    """Rank every item the user has not rated in train or validation."""
    if user not in split.train:
        raise InvalidArgumentError(f"unknown user {user}")
    if boxes is None:
        boxes = model.encode(user_window(split, user, model.config.L)[None, :])[0]
    items = model.item_matrix()
    rated = split.rated_items(user)
    candidates = np.setdiff1d(np.arange(1, split.n_items + 1), np.fromiter(rated, np.int64))
    ranked, dist = rank_items(boxes, items, candidates, model.config.distance_params)
    if k is not None:
        ranked, dist = ranked[:k], dist[:k]
    return RankingRow(user, ranked, dist, set(split.test.get(user, ())))


# -- metrics ---------------------------------------------------------------------


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not relevant:
        raise InvalidArgumentError("empty relevant set")
    hits = sum(1 for i in ranked[:k] if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not relevant:
        raise InvalidArgumentError("empty relevant set")
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(ranked[:k]) if i in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


def map_at_k(ranked, relevant, k: int) -> float:
    """Average precision at k for one user, normalized by min(k, |relevant|)."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not relevant:
        raise InvalidArgumentError("empty relevant set")
    hits = 0
    total = 0.0
    for r, i in enumerate(ranked[:k], 1):
        if i in relevant:
            hits += 1
            total += hits / r
    return total / min(k, len(relevant))


METRICS = {"recall": recall_at_k, "ndcg": ndcg_at_k, "map": map_at_k}


@dataclass
class MetricTable:
    ks: tuple
    values: dict = field(default_factory=dict)  # (metric, k) -> mean
    n_users: int = 0
    skipped_users: int = 0
    meta: dict = field(default_factory=dict)

    def get(self, metric: str, k: int) -> float:
        return self.values[(metric, k)]

    def to_text(self) -> str:
        lines = ["k\tRecall@k\tNDCG@k\tMAP@k"]
        for k in self.ks:
            lines.append(f"{k}\t" + "\t".join(f"{self.values[(m, k)]:.4f}" for m in METRICS))
        lines.append(f"# users evaluated: {self.n_users}, skipped (no test items): {self.skipped_users}")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        base = {key: self.meta.get(key) for key in ("dataset", "mode", "M", "gamma", "seed")}
        return [
            {**base, "k": k, **{m: self.values[(m, k)] for m in METRICS}, "n_users": self.n_users}
            for k in self.ks
        ]

    def write(self, path) -> None:
        payload = {"records": self.records(), "skipped_users": self.skipped_users}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metric_table(rows, ks=DEFAULT_KS, meta=None) -> MetricTable:
    ks = tuple(sorted(ks))
    sums = {(m, k): 0.0 for m in METRICS for k in ks}
    counted = skipped = 0
    for row in sorted(rows, key=lambda r: r.user):
        if not row.relevant:
            skipped += 1
            continue
        counted += 1
        for m, fn in METRICS.items():
            for k in ks:
                sums[(m, k)] += fn(row.ranked, row.relevant, k)
    values = {key: (v / counted if counted else 0.0) for key, v in sums.items()}
    return MetricTable(ks, values, counted, skipped, dict(meta or {}))


def rank_users(model: Model, split: SplitDataset, users=None, k=None, threads=1) -> list[RankingRow]:
    users = split.users if users is None else list(users)
    windows = np.stack([user_window(split, u, model.config.L) for u in users]) if users else []
    boxsets = model.encode(windows) if users else []

    def one(pair):
        user, boxes = pair
        return score_all(model, split, user, boxes=boxes, k=k)

    pairs = list(zip(users, boxsets))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


def evaluate(model: Model, split: SplitDataset, ks=DEFAULT_KS, threads=1, meta=None) -> MetricTable:
    """Per-k metric means over users with a non-empty test set."""
    ks = tuple(sorted(ks))
    if not any(split.test.values()):
        raise InvalidArgumentError("test split is empty")
    users = [u for u in split.users]
    rows = rank_users(model, split, users, k=max(ks), threads=threads)
    info = {"dataset": split.name, "mode": model.config.mode, "M": model.config.M,
            "gamma": model.config.gamma}
    info.update(meta or {})
    return metric_table(rows, ks, info)


def random_recall_baseline(split: SplitDataset, k: int) -> float:
    """Expected Recall@k of a uniformly random ranking, averaged over users."""
    vals = []
    for u in split.users:
        if not split.test.get(u):
            continue
        n = split.n_items - len(split.rated_items(u))
        vals.append(min(k, n) / n)
    return float(np.mean(vals))


def comparison_table(tables: dict, k: int) -> str:
    """One row per named run with its Recall/NDCG/MAP at ``k``."""
    lines = [f"run\tRecall@{k}\tNDCG@{k}\tMAP@{k}"]
    for name, table in tables.items():
        lines.append(f"{name}\t" + "\t".join(f"{table.get(m, k):.4f}" for m in METRICS))
    return "\n".join(lines)

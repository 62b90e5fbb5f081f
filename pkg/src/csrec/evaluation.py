"""Leave-one-out top-K evaluation: HR@K, NDCG@K and per-group breakdowns."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import GROUP_LABELS, Split

DEFAULT_CUTOFFS = (5, 10)


def rank_items(scores, candidates) -> np.ndarray:
    """Candidates by descending score, ties by ascending item index.

    ``scores`` is indexable by item (a full score vector or a mapping).
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise ValueError("no candidates to rank")
    s = np.array([scores[i] for i in candidates], dtype=np.float64)
    return candidates[np.lexsort((candidates, -s))]


def rank_of(scores: np.ndarray, candidates: np.ndarray, target: int) -> int:
    """1-based position of ``target`` among ``candidates`` under the
    ordering of :func:`rank_items`, without sorting."""
    s = scores[candidates]
    t = scores[target]
    return 1 + int(np.sum(s > t) + np.sum((s == t) & (candidates < target)))


def hit_rate_at_k(rank: int, k: int) -> int:
    if rank < 1:
        raise ValueError("ranks start at 1")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item: ``1 / log2(rank + 1)`` inside the top ``k``."""
    if rank < 1:
        raise ValueError("ranks start at 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class RankingReport:
    """``metrics[k] = (HR@k, NDCG@k)`` averaged over ``ranks`` (user -> rank
    of that user's held-out item)."""

    metrics: dict
    ranks: dict
    groups: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def cutoffs(self) -> tuple:
        return tuple(sorted(self.metrics))

    def flat(self) -> dict:
        out = {}
        for k in self.cutoffs:
            out[f"HR@{k}"], out[f"NDCG@{k}"] = self.metrics[k]
        return out

    def to_json(self, path) -> None:
        doc = {
            "metadata": self.metadata,
            "metrics": self.flat(),
            "num_users": len(self.ranks),
            "groups": {
                g: None if v is None else {"num_users": v["num_users"], **_flat(v["metrics"])}
                for g, v in self.groups.items()
            },
            "ranks": {str(u): r for u, r in sorted(self.ranks.items())},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    def rows(self) -> list[dict]:
        """Flat rows ``model, K, HR, NDCG, group`` (``group == "all"`` for the
        whole population; absent groups are skipped)."""
        model = self.metadata.get("model", "")
        rows = [dict(model=model, K=k, HR=hr, NDCG=nd, group="all")
                for k, (hr, nd) in sorted(self.metrics.items())]
        for g, v in self.groups.items():
            if v is None:
                continue
            rows += [dict(model=model, K=k, HR=hr, NDCG=nd, group=g)
                     for k, (hr, nd) in sorted(v["metrics"].items())]
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=["model", "K", "HR", "NDCG", "group"], lineterminator="\n")
            w.writeheader()
            for r in self.rows():
                w.writerow({**r, "HR": repr(float(r["HR"])), "NDCG": repr(float(r["NDCG"]))})


def _flat(metrics):
    out = {}
    for k, (hr, nd) in sorted(metrics.items()):
        out[f"HR@{k}"], out[f"NDCG@{k}"] = hr, nd
    return out


def summarize(ranks, cutoffs) -> dict:
    """Mean HR/NDCG over a collection of ranks (exactly rounded sums, so the
    result does not depend on user order)."""
    ranks = list(ranks)
    out = {}
    for k in cutoffs:
        if not ranks:
            out[k] = (0.0, 0.0)
            continue
        out[k] = (
            math.fsum(hit_rate_at_k(r, k) for r in ranks) / len(ranks),
            math.fsum(ndcg_at_k(r, k) for r in ranks) / len(ranks),
        )
    return out


def _candidates(train_items: np.ndarray, N: int, target: int, mode, rng) -> np.ndarray:
    rest = np.setdiff1d(np.arange(N), train_items, assume_unique=True)
    if mode == "full":
        return rest
    _, n = mode
    pool = rest[rest != target]
    pick = rng.choice(pool, size=min(n, len(pool)), replace=False)
    return np.sort(np.append(pick, target))


def parse_candidates(text: str):
    """``"full"`` or ``"sampled:100"`` -> ``"full"`` / ``("sampled", 100)``."""
    if text == "full":
        return "full"
    kind, _, n = text.partition(":")
    if kind != "sampled" or not n.isdigit() or int(n) < 1:
        raise ValueError(f"bad candidate mode {text!r}")
    return ("sampled", int(n))


def evaluate(model, split: Split, cutoffs=DEFAULT_CUTOFFS, candidates="full", seed: int = 0,
             metadata: dict | None = None) -> RankingReport:
    """Rank each test user's held-out item among their candidates.

    ``model`` is an :class:`EmbeddingTable`, anything with a ``scores(u)``
    method returning a full score vector, or a callable
    ``(u, candidates) -> ranked candidates``.  Candidates are all items the
    user has not interacted with in training, or a seeded sample of them plus
    the held-out item.
    """
    if isinstance(candidates, str):
        candidates = parse_candidates(candidates)
    train = split.train
    N = train.num_items
    user_items = train.user_items
    rng = np.random.default_rng([seed, 1])
    ranks = {}
    for u, target in split.test:
        cands = _candidates(user_items[u], N, target, candidates, rng)
        if hasattr(model, "scores"):
            ranks[u] = rank_of(np.asarray(model.scores(u), dtype=np.float64), cands, target)
        else:
            ranked = list(model(u, cands))
            ranks[u] = ranked.index(target) + 1
    meta = dict(metadata or {})
    meta.setdefault("candidates", candidates if candidates == "full" else f"sampled:{candidates[1]}")
    return RankingReport(metrics=summarize(ranks.values(), cutoffs), ranks=ranks, metadata=meta)


def group_report(report: RankingReport, groups: dict) -> dict:
    """Per-group metric means; a group with no evaluated user maps to ``None``."""
    out = {}
    for label in list(GROUP_LABELS) + [g for g in groups if g not in GROUP_LABELS]:
        if label not in groups:
            continue
        ranks = [report.ranks[u] for u in sorted(groups[label]) if u in report.ranks]
        out[label] = None if not ranks else {
            "num_users": len(ranks),
            "metrics": summarize(ranks, report.cutoffs),
        }
    report.groups = out
    return out


"""Non-factorization baselines (random, popularity) and simplified SBPR.

BPR, SocialBPR and UGPMF are plain training configurations; see
:data:`MODEL_REGULARIZERS`.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as kern
from .data import Dataset
from .model import EmbeddingTable, RegKind
from .training import (
    STREAM_INTERACTIONS,
    DivergedError,
    NegativeSampler,
    TrainConfig,
    _rng,
    init_embeddings,
)

# (manner, social term) for each factorization model
MODEL_REGULARIZERS = {
    "bpr": ("pairwise", RegKind.NONE),
    "socialbpr": ("pairwise", RegKind.WEIGHTED_SUM),
    "ugpmf": ("pairwise", RegKind.SUM_WEIGHTED_DISTANCE),
    "csr": ("pairwise", RegKind.CSR_PRODUCT_SHARING),
}


def rank_random(u: int, candidates, seed: int) -> np.ndarray:
    """Seeded uniform permutation of ``candidates``; the stream depends on ``u``."""
    candidates = np.asarray(candidates)
    return np.random.default_rng([seed, u]).permutation(candidates)


class PopularityModel:
    def __init__(self, dataset: Dataset):
        self.counts = np.bincount(dataset.items, minlength=dataset.num_items).astype(np.int64)

    def scores(self, u: int = 0) -> np.ndarray:
        return self.counts.astype(np.float64)


def rank_itempop(model: PopularityModel, candidates) -> np.ndarray:
    """Most popular first; ties by ascending item index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    return candidates[np.lexsort((candidates, -model.counts[candidates]))]


# -- SBPR --------------------------------------------------------------------

class SocialItems:
    """Per user: items a friend (anyone sharing with them either way) has
    interacted with but the user has not, and how many friends had each."""

    def __init__(self, dataset: Dataset):
        M = dataset.num_users
        friends = [set() for _ in range(M)]
        for u, v, _ in dataset.shares.tolist():
            friends[u].add(v)
            friends[v].add(u)
        own = [set(x.tolist()) for x in dataset.user_items]
        self.items: list[np.ndarray] = []
        self.coef: list[np.ndarray] = []
        for u in range(M):
            counts: dict[int, int] = {}
            for f in sorted(friends[u]):
                for i in own[f]:
                    if i not in own[u]:
                        counts[i] = counts.get(i, 0) + 1
            keys = sorted(counts)
            self.items.append(np.array(keys, dtype=np.int64))
            self.coef.append(1.0 + np.array([counts[i] for i in keys], dtype=np.float64))
        self.N = dataset.num_items
        codes = [u * self.N + self.items[u] for u in range(M)]
        self.codes = np.sort(np.concatenate(codes)) if codes else np.zeros(0, dtype=np.int64)

    def contains(self, users, items) -> np.ndarray:
        if len(self.codes) == 0:
            return np.zeros(len(users), dtype=bool)
        c = users * self.N + items
        pos = np.minimum(np.searchsorted(self.codes, c), len(self.codes) - 1)
        return self.codes[pos] == c


def sbpr_step(emb: EmbeddingTable, u: int, triple, alpha: float, lambda_p: float = 0.0,
              lambda_q: float = 0.0, coef: float = 1.0) -> None:
    """One in-place SBPR update for user ``u`` and ``(pos, social, neg)``.

    ``social=None`` (user without social items) degrades to a BPR step on
    ``(pos, neg)``; ``neg=None`` keeps only the positive-over-social tier.
    """
    i, k, j = triple
    k = -1 if k is None else k
    j = -1 if j is None else j
    if k < 0:
        if j < 0:
            raise ValueError("need a social item or a negative")
        ok = kern.bpr_update(emb.P, emb.Q, u, i, j, alpha, lambda_p, lambda_q)
    else:
        ok = kern.sbpr_update(emb.P, emb.Q, u, i, k, j, float(coef), alpha, lambda_p, lambda_q)
    if not ok:
        raise FloatingPointError("non-finite parameter after SBPR step")


def sbpr_loss(emb: EmbeddingTable, u, triple, lambda_p=0.0, lambda_q=0.0, coef=1.0) -> float:
    i, k, j = triple
    p = emb.P[:, u]
    xi, xk = p @ emb.Q[:, i], p @ emb.Q[:, k]
    loss = np.logaddexp(0.0, -(xi - xk) / coef)
    l2 = lambda_p * p @ p + lambda_q * (emb.Q[:, i] @ emb.Q[:, i] + emb.Q[:, k] @ emb.Q[:, k])
    if j is not None:
        xj = p @ emb.Q[:, j]
        loss += np.logaddexp(0.0, -(xk - xj))
        l2 += lambda_q * emb.Q[:, j] @ emb.Q[:, j]
    return float(loss + l2)


def train_sbpr(dataset: Dataset, config: TrainConfig, emb: EmbeddingTable | None = None) -> EmbeddingTable:
    """SGD for simplified SBPR.

    Random draws mirror BPR training exactly, so with no shares the result is
    bit-identical to ``train(dataset, config)`` with no social term.
    """
    if emb is None:
        emb = init_embeddings(dataset.num_users, dataset.num_items, config.K, config.seed, config.init_scale)
    else:
        emb = emb.copy()
    rng = _rng(config.seed, STREAM_INTERACTIONS)
    sampler = NegativeSampler(dataset)
    social = SocialItems(dataset)
    n_soc = np.array([len(x) for x in social.items], dtype=np.int64)
    for epoch in range(config.epochs):
        base = np.repeat(np.arange(dataset.num_interactions), config.negatives_per_positive)
        perm = rng.permutation(base)
        us, pos = dataset.users[perm], dataset.items[perm]
        neg = sampler.sample(us, rng)
        soc = np.full(len(us), -1, dtype=np.int64)
        coef = np.ones(len(us))
        has = np.flatnonzero(n_soc[us] > 0)
        if len(has):
            pick = (rng.random(len(has)) * n_soc[us[has]]).astype(np.int64)
            for t, k in zip(has.tolist(), pick.tolist()):
                u = us[t]
                soc[t] = social.items[u][k]
                coef[t] = social.coef[u][k]
            # negatives must also avoid the social tier; users whose whole
            # catalogue is own-or-social keep only the first tier
            room = dataset.num_items - np.bincount(dataset.users, minlength=dataset.num_users) - n_soc
            ok = has[room[us[has]] > 0]
            neg[has] = -1
            if len(ok):
                neg[ok] = sampler.sample(us[ok], rng, exclude=social.contains)
        bad = kern.run_sbpr(emb.P, emb.Q, us, pos, soc, neg, coef,
                            float(config.alpha), float(config.lambda_p), float(config.lambda_q))
        if bad >= 0:
            raise DivergedError(int(bad), epoch)
    return emb

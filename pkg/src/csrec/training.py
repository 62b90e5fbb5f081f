"""SGD training of MF models in point-wise or pair-wise (BPR) manner with any
social regularizer, plus full-batch analytic gradients and a finite-difference
checker for them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import _kernels as kern
from .data import Dataset
from .model import (
    EmbeddingTable,
    RegKind,
    RegularizerSpec,
    interaction_loss,
    social_term,
)

logger = logging.getLogger(__name__)

MANNERS = ("pointwise", "pairwise")


class DivergedError(FloatingPointError):
    def __init__(self, step: int, epoch: int | None = None):
        self.step = step
        self.epoch = epoch
        where = f"step {step}" + (f" of epoch {epoch}" if epoch is not None else "")
        super().__init__(f"non-finite parameter after {where}")


class NoNegativeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    manner: str = "pairwise"
    alpha: float = 0.01
    K: int = 16
    lambda_s: float = 0.01
    lambda_p: float = 0.01
    lambda_q: float = 0.01
    epochs: int = 200
    negatives_per_positive: int = 1
    seed: int = 0
    init_scale: float = 0.01
    full_batch: bool = False

    def __post_init__(self):
        if self.manner not in MANNERS:
            raise ValueError(f"manner must be one of {MANNERS}")
        if not self.alpha >= 0:
            raise ValueError("alpha must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if min(self.lambda_s, self.lambda_p, self.lambda_q) < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent streams so that turning the social term on or off never
    # shifts the random numbers the interaction steps see
    return np.random.default_rng([seed, stream])


STREAM_INIT, STREAM_INTERACTIONS, STREAM_SOCIAL, STREAM_LOG = range(4)


def init_embeddings(M: int, N: int, K: int, seed: int, init_scale: float = 0.01) -> EmbeddingTable:
    if min(M, N, K) < 1:
        raise ValueError("dimensions must be positive")
    rng = _rng(seed, STREAM_INIT)
    P = rng.standard_normal((K, M)) * init_scale
    Q = rng.standard_normal((K, N)) * init_scale
    return EmbeddingTable(P, Q)


def sample_negative(dataset: Dataset, u: int, rng: np.random.Generator) -> int:
    """Uniform draw from the items ``u`` has not interacted with."""
    observed = dataset.user_items[u]
    complement = np.setdiff1d(np.arange(dataset.num_items), observed, assume_unique=True)
    if len(complement) == 0:
        raise NoNegativeError(f"user {u} has interacted with every item")
    return int(complement[rng.integers(len(complement))])


class NegativeSampler:
    """Vectorised rejection sampler over each user's unobserved items."""

    def __init__(self, dataset: Dataset):
        self.N = dataset.num_items
        self.codes = np.unique(dataset.users * self.N + dataset.items)
        full = np.bincount(dataset.users, minlength=dataset.num_users) >= self.N
        if full.any():
            raise NoNegativeError(f"user {int(np.flatnonzero(full)[0])} has interacted with every item")

    def observed(self, users, items) -> np.ndarray:
        codes = users * self.N + items
        pos = np.searchsorted(self.codes, codes)
        pos[pos == len(self.codes)] = 0
        return self.codes[pos] == codes if len(self.codes) else np.zeros(len(codes), dtype=bool)

    def sample(self, users: np.ndarray, rng: np.random.Generator, exclude=None) -> np.ndarray:
        """One negative per entry of ``users``. ``exclude(users, items)`` may
        reject extra candidates."""
        out = rng.integers(self.N, size=len(users))
        bad = self.observed(users, out)
        if exclude is not None:
            bad |= exclude(users, out)
        while bad.any():
            idx = np.flatnonzero(bad)
            out[idx] = rng.integers(self.N, size=len(idx))
            still = self.observed(users[idx], out[idx])
            if exclude is not None:
                still |= exclude(users[idx], out[idx])
            bad[idx] = still
        return out


# -- analytic full-batch gradients ------------------------------------------

def objective_gradient(
    emb: EmbeddingTable,
    dataset: Dataset,
    spec: RegularizerSpec,
    manner: str = "pointwise",
    triples=None,
    lambda_p: float = 0.0,
    lambda_q: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`csrec.model.total_objective` w.r.t. ``(P, Q)``."""
    P, Q = emb.P, emb.Q
    dP = np.zeros_like(P)
    dQ = np.zeros_like(Q)
    if manner == "pointwise":
        u, i = dataset.users, dataset.items
        err = dataset.values - np.einsum("kn,kn->n", P[:, u], Q[:, i])
        np.add.at(dP.T, u, (-2.0 * err * Q[:, i]).T)
        np.add.at(dQ.T, i, (-2.0 * err * P[:, u]).T)
        dP += 2.0 * lambda_p * P
        dQ += 2.0 * lambda_q * Q
    elif manner == "pairwise":
        if triples is None:
            raise ValueError("pairwise gradient needs a batch of (u, i, j) triples")
        T = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        u, i, j = T[:, 0], T[:, 1], T[:, 2]
        p, qi, qj = P[:, u], Q[:, i], Q[:, j]
        g = -expit(-np.einsum("kn,kn->n", p, qi - qj))
        np.add.at(dP.T, u, (g * (qi - qj) + 2.0 * lambda_p * p).T)
        np.add.at(dQ.T, i, (g * p + 2.0 * lambda_q * qi).T)
        np.add.at(dQ.T, j, (-g * p + 2.0 * lambda_q * qj).T)
    else:
        raise ValueError(f"unknown manner {manner!r}")

    if spec.kind is RegKind.NONE or spec.lambda_s == 0:
        return dP, dQ
    sP, sQ = social_gradient(emb, dataset, spec)
    dP += spec.lambda_s * sP
    dQ += spec.lambda_s * sQ
    return dP, dQ


def social_gradient(emb: EmbeddingTable, dataset: Dataset, spec: RegularizerSpec):
    """Gradient of the unweighted social term."""
    P, Q = emb.P, emb.Q
    dP = np.zeros_like(P)
    dQ = np.zeros_like(Q)
    kind = spec.kind
    if kind is RegKind.WEIGHTED_SUM:
        strengths = spec.edge_strengths()
        resid = {}
        for (u, v), s in strengths.items():
            resid.setdefault(u, P[:, u].copy())
            resid[u] -= s * P[:, v]
        for u, r in resid.items():
            dP[:, u] += 2.0 * r
        for (u, v), s in strengths.items():
            dP[:, v] -= 2.0 * s * resid[u]
    elif kind in (RegKind.SUM_WEIGHTED_DISTANCE, RegKind.CSR_GENERAL):
        us, vs, w2 = _pair_weights(spec, P.shape[0])
        if len(us):
            g = 2.0 * w2.T * (P[:, us] - P[:, vs])
            np.add.at(dP.T, us, g.T)
            np.add.at(dP.T, vs, -g.T)
    elif kind is RegKind.CSR_PRODUCT_SHARING:
        D = spec.triplets(dataset)
        if len(D):
            us, vs, its = D[:, 0], D[:, 1], D[:, 2]
            d = P[:, us] - P[:, vs]
            q = Q[:, its]
            g = 2.0 * d * q * q
            np.add.at(dP.T, us, g.T)
            np.add.at(dP.T, vs, -g.T)
            if not spec.freeze_item_weights:
                np.add.at(dQ.T, its, (2.0 * d * d * q).T)
    return dP, dQ


def _pair_weights(spec: RegularizerSpec, K: int):
    """``(u, v, w2)`` with ``w2`` the per-dimension squared weight, (n, K)."""
    if spec.kind is RegKind.SUM_WEIGHTED_DISTANCE:
        strengths = spec.edge_strengths()
        n = len(strengths)
        us = np.array([u for u, _ in strengths], dtype=np.int64)
        vs = np.array([v for _, v in strengths], dtype=np.int64)
        s = np.fromiter(strengths.values(), dtype=np.float64, count=n)
        return us, vs, np.repeat(s[:, None], K, axis=1)
    us, vs, W = spec.weight_pairs(K)
    return us, vs, W * W


def finite_diff_gradient(f, emb: EmbeddingTable, which: str, index: tuple[int, int], h: float = 1e-5) -> float:
    """Central difference of ``f(emb)`` along one entry of ``P`` or ``Q``."""
    if h <= 0:
        raise ValueError("h must be positive")
    A = emb.P if which == "P" else emb.Q
    orig = A[index]
    try:
        A[index] = orig + h
        fp = f(emb)
        A[index] = orig - h
        fm = f(emb)
    finally:
        A[index] = orig
    return (fp - fm) / (2.0 * h)


# -- SGD ---------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    interaction_loss: float
    social_term: float
    total: float
    grad_norm: float


@dataclass
class TrainingLog:
    rows: list[EpochStats] = field(default_factory=list)

    COLUMNS = ("epoch", "interaction_loss", "social_term", "total", "grad_norm")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(self.COLUMNS) + "\n")
            for r in self.rows:
                f.write(f"{r.epoch},{r.interaction_loss!r},{r.social_term!r},{r.total!r},{r.grad_norm!r}\n")


class _SocialProgram:
    """The social regularizer flattened into arrays the step kernel reads."""

    def __init__(self, dataset: Dataset, spec: RegularizerSpec, K: int):
        e = kern.empty_int()
        self.mode = kern.SOC_NONE
        self.a = self.b = self.c = self.indptr = self.fidx = e
        self.fstr = np.zeros(0)
        self.w2 = np.zeros((0, K))
        self.n = 0
        if not spec.active:
            return
        kind = spec.kind
        if kind is RegKind.WEIGHTED_SUM:
            strengths = spec.edge_strengths()
            M = dataset.num_users
            friends = [[] for _ in range(M)]
            for (u, v), s in strengths.items():
                friends[u].append((v, s))
            self.mode = kern.SOC_WEIGHTED_SUM
            self.indptr = np.cumsum([0] + [len(f) for f in friends]).astype(np.int64)
            self.fidx = np.array([v for f in friends for v, _ in f], dtype=np.int64)
            self.fstr = np.array([s for f in friends for _, s in f], dtype=np.float64)
            self.a = np.array([u for u in range(M) if friends[u]], dtype=np.int64)
        elif kind is RegKind.CSR_PRODUCT_SHARING:
            D = spec.triplets(dataset)
            self.mode = kern.SOC_PRODUCT
            self.a, self.b, self.c = (np.ascontiguousarray(D[:, k]) for k in range(3))
        else:
            self.mode = kern.SOC_PAIR
            self.a, self.b, w2 = _pair_weights(spec, K)
            self.w2 = np.ascontiguousarray(w2.reshape(-1, K))
        self.n = len(self.a)


def _interleave(n_inter: int, n_social: int) -> np.ndarray:
    """Spread social steps evenly through the interaction steps.

    Returns slot codes: ``k >= 0`` for interaction slot k, ``-1 - k`` for
    social slot k."""
    keys = np.concatenate([(np.arange(n_inter) + 0.5) / max(n_inter, 1),
                           (np.arange(n_social) + 0.5) / max(n_social, 1)])
    codes = np.concatenate([np.arange(n_inter), -1 - np.arange(n_social)])
    return codes[np.argsort(keys, kind="stable")]


class Trainer:
    """Holds the per-run state (RNG streams, samplers, social arrays) so that
    :meth:`epoch` can be called repeatedly."""

    def __init__(self, dataset: Dataset, config: TrainConfig, spec: RegularizerSpec):
        self.dataset = dataset
        self.config = config
        self.spec = replace(spec, lambda_s=config.lambda_s)
        self.rng_inter = _rng(config.seed, STREAM_INTERACTIONS)
        self.rng_social = _rng(config.seed, STREAM_SOCIAL)
        self.pairwise = config.manner == "pairwise"
        self.sampler = NegativeSampler(dataset) if self.pairwise else None
        self.social = _SocialProgram(dataset, self.spec, config.K)
        self.epochs_done = 0
        self.last_triples = None

    def draw_interactions(self):
        """Shuffled interaction records for one epoch: ``(u, i, j, y)``."""
        ds = self.dataset
        if self.pairwise:
            base = np.repeat(np.arange(ds.num_interactions), self.config.negatives_per_positive)
            perm = self.rng_inter.permutation(base)
            u, i = ds.users[perm], ds.items[perm]
            j = self.sampler.sample(u, self.rng_inter)
            return u, i, j, np.zeros(len(u))
        perm = self.rng_inter.permutation(ds.num_interactions)
        return ds.users[perm], ds.items[perm], ds.items[perm], ds.values[perm]

    def epoch(self, emb: EmbeddingTable) -> None:
        cfg = self.config
        u, i, j, y = self.draw_interactions()
        self.last_triples = np.stack([u, i, j], axis=1) if self.pairwise else None
        if cfg.full_batch:
            dP, dQ = objective_gradient(emb, self.dataset, self.spec, cfg.manner, self.last_triples,
                                        cfg.lambda_p, cfg.lambda_q)
            emb.P -= cfg.alpha * dP
            emb.Q -= cfg.alpha * dQ
            if not emb.is_finite():
                raise DivergedError(0, self.epochs_done)
            self.epochs_done += 1
            return
        soc = self.social
        social_perm = self.rng_social.permutation(soc.n) if soc.n else kern.empty_int()
        order = _interleave(len(u), soc.n)
        social = order < 0
        order[social] = -1 - social_perm[-1 - order[social]]
        bad = kern.run_schedule(
            emb.P, emb.Q, order.astype(np.int64), self.pairwise,
            u.astype(np.int64), i.astype(np.int64), j.astype(np.int64), y.astype(np.float64),
            soc.mode, soc.a, soc.b, soc.c, soc.w2, soc.indptr, soc.fidx, soc.fstr,
            float(cfg.alpha), float(cfg.lambda_p), float(cfg.lambda_q), float(self.spec.lambda_s),
            bool(self.spec.freeze_item_weights),
        )
        if bad >= 0:
            raise DivergedError(int(bad), self.epochs_done)
        self.epochs_done += 1


def sgd_epoch(emb: EmbeddingTable, dataset: Dataset, config: TrainConfig, spec: RegularizerSpec,
              trainer: Trainer | None = None) -> dict:
    """One pass over the shuffled training records, updating ``emb`` in place.

    Returns the objective before and after the pass (on the pass's own
    sampled triples in pair-wise mode) and the gradient norm before it.
    """
    trainer = trainer or Trainer(dataset, config, spec)
    before_state = emb.copy()
    trainer.epoch(emb)
    triples = trainer.last_triples
    args = (dataset, trainer.spec, config.manner, triples, config.lambda_p, config.lambda_q)
    before = _objective(before_state, *args)
    after = _objective(emb, *args)
    dP, dQ = objective_gradient(before_state, *args)
    return {
        "loss_before": before,
        "loss_after": after,
        "grad_norm": float(np.sqrt(np.sum(dP**2) + np.sum(dQ**2))),
    }


def _objective(emb, dataset, spec, manner, triples, lp, lq):
    loss = interaction_loss(emb, dataset, manner, triples, lp, lq)
    return loss + (spec.lambda_s * social_term(emb, dataset, spec) if spec.active else 0.0)


def _log_row(epoch, emb, dataset, spec, config, triples) -> EpochStats:
    inter = interaction_loss(emb, dataset, config.manner, triples, config.lambda_p, config.lambda_q)
    soc = social_term(emb, dataset, spec) if spec.kind is not RegKind.NONE else 0.0
    total = inter + (spec.lambda_s * soc if spec.active else 0.0)
    dP, dQ = objective_gradient(emb, dataset, spec, config.manner, triples, config.lambda_p, config.lambda_q)
    return EpochStats(epoch, inter, soc, total, float(np.sqrt(np.sum(dP**2) + np.sum(dQ**2))))


def train(dataset: Dataset, config: TrainConfig, spec: RegularizerSpec | None = None,
          emb: EmbeddingTable | None = None, log_every: int = 1) -> tuple[EmbeddingTable, TrainingLog]:
    """Train from seeded initial factors (or ``emb``) for ``config.epochs``.

    ``config.lambda_s`` overrides ``spec.lambda_s``; ``spec`` only selects the
    social term and its inputs.  The log evaluates the objective on a fixed
    batch of triples drawn once from a separate random stream, so curves are
    comparable across epochs.
    """
    spec = replace(spec or RegularizerSpec(), lambda_s=config.lambda_s)
    if emb is None:
        emb = init_embeddings(dataset.num_users, dataset.num_items, config.K, config.seed, config.init_scale)
    else:
        emb = emb.copy()
    emb.check_bound(dataset)
    log = TrainingLog()
    triples = None
    if config.manner == "pairwise" and dataset.num_interactions:
        sampler = NegativeSampler(dataset)
        neg = sampler.sample(dataset.users, _rng(config.seed, STREAM_LOG))
        triples = np.stack([dataset.users, dataset.items, neg], axis=1)
    if log_every:
        log.rows.append(_log_row(0, emb, dataset, spec, config, triples))
    trainer = Trainer(dataset, config, spec)
    for epoch in range(1, config.epochs + 1):
        trainer.epoch(emb)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs):
            row = _log_row(epoch, emb, dataset, spec, config, triples)
            log.rows.append(row)
            logger.debug("epoch %d total %.6g", epoch, row.total)
    return emb, log

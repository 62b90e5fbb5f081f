"""Latent factor tables and the objective terms: point-wise MF loss, BPR loss,
the two classic social regularizers and the characterized (per-dimension)
social regularizer."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SocialStrengths


class RegKind(str, enum.Enum):
    NONE = "none"
    WEIGHTED_SUM = "weighted_sum"
    SUM_WEIGHTED_DISTANCE = "sum_weighted_distance"
    CSR_GENERAL = "csr_general"
    CSR_PRODUCT_SHARING = "csr_product_sharing"


@dataclass
class EmbeddingTable:
    """User factors ``P`` (K x M) and item factors ``Q`` (K x N); column
    ``u`` of ``P`` is the latent vector of user ``u``."""

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[0] != self.Q.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.P.shape} and {self.Q.shape}")

    @property
    def K(self) -> int:
        return self.P.shape[0]

    @property
    def num_users(self) -> int:
        return self.P.shape[1]

    @property
    def num_items(self) -> int:
        return self.Q.shape[1]

    def copy(self) -> EmbeddingTable:
        return EmbeddingTable(self.P.copy(), self.Q.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.P).all() and np.isfinite(self.Q).all())

    def scores(self, u: int) -> np.ndarray:
        return self.Q.T @ self.P[:, u]

    def check_bound(self, dataset: Dataset):
        if (self.num_users, self.num_items) != (dataset.num_users, dataset.num_items):
            raise ValueError(
                f"embeddings are {self.num_users}x{self.num_items} but dataset is "
                f"{dataset.num_users}x{dataset.num_items}"
            )


@dataclass
class RegularizerSpec:
    """Which social term is active and with what weight.

    ``strengths`` feed the two classic regularizers; ``pair_weights`` maps a
    user pair to its K-vector for the general characterized term; the
    product-sharing term reads its triplets from the dataset.
    """

    kind: RegKind = RegKind.NONE
    lambda_s: float = 0.0
    strengths: SocialStrengths | None = None
    pair_weights: dict | None = None
    symmetrize: bool = True
    freeze_item_weights: bool = False

    def __post_init__(self):
        self.kind = RegKind(self.kind)
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be nonnegative")

    @property
    def active(self) -> bool:
        return self.kind is not RegKind.NONE and self.lambda_s != 0.0

    def edge_strengths(self) -> SocialStrengths:
        s = self.strengths if self.strengths is not None else SocialStrengths()
        return s.symmetrized() if self.symmetrize else s

    def weight_pairs(self, K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(u, v, W)`` arrays for the general term, W of shape (n, K)."""
        items = dict(self.pair_weights or {})
        if self.symmetrize:
            for (u, v), w in list(items.items()):
                items.setdefault((v, u), w)
        us = np.array([u for u, _ in items], dtype=np.int64)
        vs = np.array([v for _, v in items], dtype=np.int64)
        W = np.array([np.asarray(w, dtype=np.float64) for w in items.values()]).reshape(len(items), -1)
        if len(items) and W.shape[1] != K:
            raise ValueError(f"weight vectors have length {W.shape[1]}, expected K={K}")
        return us, vs, W.reshape(len(items), K)

    def triplets(self, dataset: Dataset) -> np.ndarray:
        D = dataset.shares
        if self.symmetrize and len(D):
            D = np.concatenate([D, D[:, [1, 0, 2]]])
        return D


def predict(emb: EmbeddingTable, u: int, i: int) -> float:
    if not (0 <= u < emb.num_users and 0 <= i < emb.num_items):
        raise IndexError(f"(u={u}, i={i}) out of range for {emb.num_users}x{emb.num_items}")
    return float(emb.P[:, u] @ emb.Q[:, i])


def l2_penalty(emb: EmbeddingTable, lambda_p: float, lambda_q: float) -> float:
    return lambda_p * float(np.sum(emb.P**2)) + lambda_q * float(np.sum(emb.Q**2))


def pointwise_loss(emb: EmbeddingTable, dataset: Dataset, lambda_p: float = 0.0, lambda_q: float = 0.0) -> float:
    """Squared error over observed entries plus Frobenius L2 on both tables."""
    emb.check_bound(dataset)
    pred = np.einsum("kn,kn->n", emb.P[:, dataset.users], emb.Q[:, dataset.items])
    return float(np.sum((dataset.values - pred) ** 2)) + l2_penalty(emb, lambda_p, lambda_q)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def bpr_loss(emb: EmbeddingTable, triple, lambda_p: float = 0.0, lambda_q: float = 0.0) -> float:
    """``-ln sigmoid(x_ui - x_uj)`` plus L2 on the three vectors involved."""
    u, i, j = triple
    if i == j:
        raise ValueError("BPR pair needs distinct items")
    p, qi, qj = emb.P[:, u], emb.Q[:, i], emb.Q[:, j]
    x = float(p @ (qi - qj))
    return float(-log_sigmoid(x)) + lambda_p * float(p @ p) + lambda_q * float(qi @ qi + qj @ qj)


def bpr_batch_loss(emb: EmbeddingTable, triples: np.ndarray, lambda_p: float = 0.0, lambda_q: float = 0.0) -> float:
    """Sum of :func:`bpr_loss` over an ``(n, 3)`` array of triples."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if np.any(triples[:, 1] == triples[:, 2]):
        raise ValueError("BPR pair needs distinct items")
    p = emb.P[:, triples[:, 0]]
    qi = emb.Q[:, triples[:, 1]]
    qj = emb.Q[:, triples[:, 2]]
    x = np.einsum("kn,kn->n", p, qi - qj)
    l2 = lambda_p * np.sum(p**2) + lambda_q * (np.sum(qi**2) + np.sum(qj**2))
    return float(-np.sum(log_sigmoid(x)) + l2)


def social_reg_weighted_sum(emb: EmbeddingTable, strengths: SocialStrengths) -> float:
    """Sum over users with friends of ``||p_u - sum_v s_uv p_v||^2``."""
    P = emb.P
    target = {}
    for (u, v), s in strengths.items():
        target[u] = target.get(u, 0.0) + s * P[:, v]
    return float(sum(np.sum((P[:, u] - t) ** 2) for u, t in target.items()))


def social_reg_sum_weighted_distance(emb: EmbeddingTable, strengths: SocialStrengths) -> float:
    """``sum_(u,v) s_uv ||p_u - p_v||^2``."""
    if not strengths:
        return 0.0
    pairs = np.array(list(strengths), dtype=np.int64)
    s = np.fromiter(strengths.values(), dtype=np.float64, count=len(strengths))
    d = emb.P[:, pairs[:, 0]] - emb.P[:, pairs[:, 1]]
    return float(np.sum(s * np.sum(d**2, axis=0)))


def csr_reg_general(emb: EmbeddingTable, us, vs, weights) -> float:
    """``sum_k ||(p_u - p_v) o w_k||^2`` over pairs ``(us[k], vs[k])``."""
    if len(us) == 0:
        return 0.0
    weights = np.asarray(weights, dtype=np.float64).reshape(len(us), -1)
    if weights.shape[1] != emb.K:
        raise ValueError(f"weight vectors have length {weights.shape[1]}, expected K={emb.K}")
    d = emb.P[:, us] - emb.P[:, vs]
    return float(np.sum((d * weights.T) ** 2))


def csr_reg_product_sharing(emb: EmbeddingTable, triplets) -> float:
    """Characterized term with each pair weighted by the shared item's factors."""
    D = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if len(D) == 0:
        return 0.0
    return csr_reg_general(emb, D[:, 0], D[:, 1], emb.Q[:, D[:, 2]].T)


def social_term(emb: EmbeddingTable, dataset: Dataset, spec: RegularizerSpec) -> float:
    """The unweighted social term selected by ``spec.kind``."""
    kind = spec.kind
    if kind is RegKind.NONE:
        return 0.0
    if kind is RegKind.WEIGHTED_SUM:
        return social_reg_weighted_sum(emb, spec.edge_strengths())
    if kind is RegKind.SUM_WEIGHTED_DISTANCE:
        return social_reg_sum_weighted_distance(emb, spec.edge_strengths())
    if kind is RegKind.CSR_GENERAL:
        return csr_reg_general(emb, *spec.weight_pairs(emb.K))
    return csr_reg_product_sharing(emb, spec.triplets(dataset))


def interaction_loss(emb, dataset, manner, triples=None, lambda_p=0.0, lambda_q=0.0) -> float:
    if manner == "pointwise":
        return pointwise_loss(emb, dataset, lambda_p, lambda_q)
    if manner == "pairwise":
        if triples is None:
            raise ValueError("pairwise objective needs a batch of (u, i, j) triples")
        return bpr_batch_loss(emb, triples, lambda_p, lambda_q)
    raise ValueError(f"unknown manner {manner!r}")


def total_objective(
    emb: EmbeddingTable,
    dataset: Dataset,
    spec: RegularizerSpec,
    manner: str = "pointwise",
    triples=None,
    lambda_p: float = 0.0,
    lambda_q: float = 0.0,
) -> float:
    """Interaction loss (with its L2 terms) plus ``lambda_s`` times the social term."""
    loss = interaction_loss(emb, dataset, manner, triples, lambda_p, lambda_q)
    if spec.kind is RegKind.NONE or spec.lambda_s == 0:
        return loss
    return loss + spec.lambda_s * social_term(emb, dataset, spec)

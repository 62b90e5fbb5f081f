import numpy as np
import pytest

from csrec.data import Dataset, SocialStrengths
from csrec.model import EmbeddingTable


def make_dataset(users, items, M=None, N=None, shares=(), values=None, timestamps=None, explicit=False):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    M = M if M is not None else int(users.max()) + 1
    N = N if N is not None else int(items.max()) + 1
    return Dataset(
        user_ids=tuple(f"u{u}" for u in range(M)),
        item_ids=tuple(f"i{i}" for i in range(N)),
        users=users,
        items=items,
        values=np.ones(len(users)) if values is None else np.asarray(values, dtype=np.float64),
        shares=np.asarray(shares, dtype=np.int64).reshape(-1, 3),
        timestamps=None if timestamps is None else np.asarray(timestamps, dtype=np.float64),
        explicit=explicit,
    )


def random_instance(rng, M=6, N=8, K=4, density=0.4, n_shares=6, explicit=True, scale=1.0):
    """Small random dataset, strengths, pair weights and embeddings."""
    mask = rng.random((M, N)) < density
    for u in range(M):
        mask[u, rng.integers(N)] = True
        if mask[u].all():
            mask[u, rng.integers(N)] = False
    users, items = np.nonzero(mask)
    values = rng.normal(size=len(users)) if explicit else None
    shares = []
    while len(shares) < n_shares:
        u, v = rng.choice(M, size=2, replace=False)
        shares.append((u, v, rng.integers(N)))
    ds = make_dataset(users, items, M, N, shares, values=values, explicit=explicit)
    strengths = SocialStrengths({(int(u), int(v)): float(rng.uniform(0.1, 1.0)) for u, v, _ in shares})
    pair_weights = {pair: rng.normal(size=K) for pair in strengths}
    emb = EmbeddingTable(rng.normal(scale=scale, size=(K, M)), rng.normal(scale=scale, size=(K, N)))
    return ds, strengths, pair_weights, emb


def random_triples(rng, ds, n):
    user_items = ds.user_items
    out = []
    while len(out) < n:
        k = rng.integers(ds.num_interactions)
        u, i = int(ds.users[k]), int(ds.items[k])
        j = int(rng.integers(ds.num_items))
        if j not in user_items[u]:
            out.append((u, i, j))
    return np.array(out, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


GRAD_KINDS = ("none", "weighted_sum", "sum_weighted_distance", "csr_general", "csr_product_sharing")


def gradient_errors(seed, manner, kind, n_coords=20, h=1e-5, lambda_s=0.7):
    """Relative errors between analytic and central-difference gradients on
    ``n_coords`` random coordinates of one random instance."""
    from csrec.model import RegularizerSpec, total_objective
    from csrec.training import finite_diff_gradient, objective_gradient

    rng = np.random.default_rng([seed, GRAD_KINDS.index(kind), manner == "pairwise"])
    M, N, K = int(rng.integers(4, 11)), int(rng.integers(4, 11)), int(rng.integers(2, 6))
    ds, strengths, weights, emb = random_instance(rng, M, N, K, explicit=manner == "pointwise")
    spec = RegularizerSpec(kind, lambda_s, strengths, weights)
    triples = random_triples(rng, ds, 12) if manner == "pairwise" else None
    args = (ds, spec, manner, triples, 0.05, 0.08)
    dP, dQ = objective_gradient(emb, *args)
    errors = []
    for _ in range(n_coords):
        which = "P" if rng.random() < 0.5 else "Q"
        A = dP if which == "P" else dQ
        idx = (int(rng.integers(A.shape[0])), int(rng.integers(A.shape[1])))
        num = finite_diff_gradient(lambda e: total_objective(e, *args), emb, which, idx, h)
        ana = A[idx]
        errors.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return errors


def brute_force_metrics(scores, split, cutoffs):
    """Independent HR/NDCG: sort each user's candidates with Python's sort."""
    import math

    seen = split.train.interaction_set()
    N = split.train.num_items
    per_user = {k: ([], []) for k in cutoffs}
    for u, target in split.test:
        cands = [i for i in range(N) if (u, i) not in seen]
        ordered = sorted(cands, key=lambda i: (-scores[u][i], i))
        rank = ordered.index(target) + 1
        for k in cutoffs:
            per_user[k][0].append(1.0 if rank <= k else 0.0)
            per_user[k][1].append(1.0 / math.log2(rank + 1) if rank <= k else 0.0)
    return {k: (math.fsum(h) / len(h), math.fsum(n) / len(n)) for k, (h, n) in per_user.items()}

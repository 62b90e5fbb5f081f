import itertools
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from csrec.baselines import (
    MODEL_REGULARIZERS,
    PopularityModel,
    SocialItems,
    rank_itempop,
    rank_random,
    sbpr_loss,
    sbpr_step,
    train_sbpr,
)
from csrec.model import EmbeddingTable, RegKind
from csrec.training import TrainConfig, finite_diff_gradient, train

from conftest import make_dataset, random_instance


def test_random_ranking_is_seeded_permutation():
    a = rank_random(3, [4, 5, 6, 7], seed=1)
    assert sorted(a.tolist()) == [4, 5, 6, 7]
    np.testing.assert_array_equal(a, rank_random(3, [4, 5, 6, 7], seed=1))


def test_random_ranking_uniform_over_orderings():
    counts = Counter(tuple(rank_random(u, [0, 1, 2], seed=0).tolist()) for u in range(6000))
    assert set(counts) == set(itertools.permutations(range(3)))
    assert chisquare(list(counts.values())).pvalue > 1e-3


def test_itempop_order_and_ties():
    # A seen 3 times, B once, C twice
    ds = make_dataset([0, 1, 2, 0, 1, 0], [0, 0, 0, 1, 2, 2], N=4)
    model = PopularityModel(ds)
    assert model.counts.tolist() == [3, 1, 2, 0]
    assert rank_itempop(model, [1, 2, 0]).tolist() == [0, 2, 1]
    tie = make_dataset([0, 0], [2, 1], N=3)
    assert rank_itempop(PopularityModel(tie), [2, 1, 0]).tolist() == [1, 2, 0]


def test_model_regularizer_mapping():
    assert MODEL_REGULARIZERS["bpr"] == ("pairwise", RegKind.NONE)
    assert MODEL_REGULARIZERS["socialbpr"][1] is RegKind.WEIGHTED_SUM
    assert MODEL_REGULARIZERS["ugpmf"][1] is RegKind.SUM_WEIGHTED_DISTANCE
    assert MODEL_REGULARIZERS["csr"][1] is RegKind.CSR_PRODUCT_SHARING


def test_social_items_and_coefficients():
    # users 0 and 1 are friends (one share), 2 shares with 0 too
    ds = make_dataset([0, 1, 1, 2, 2], [0, 1, 2, 2, 3], shares=[(0, 1, 1), (2, 0, 3)], N=5)
    soc = SocialItems(ds)
    assert soc.items[0].tolist() == [1, 2, 3]
    assert soc.coef[0].tolist() == [2.0, 3.0, 2.0]  # item 2 held by two friends
    assert soc.items[1].tolist() == [0]
    assert soc.contains(np.array([0, 0, 1]), np.array([2, 4, 0])).tolist() == [True, False, True]


def test_sbpr_without_social_item_is_bpr_step():
    rng = np.random.default_rng(0)
    P, Q = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
    a, b = EmbeddingTable(P, Q), EmbeddingTable(P, Q)
    sbpr_step(a, 1, (0, None, 2), 0.1, 0.01, 0.02)
    from csrec import _kernels as kern
    kern.bpr_update(b.P, b.Q, 1, 0, 2, 0.1, 0.01, 0.02)
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.Q, b.Q)


@pytest.mark.parametrize("neg", [3, None])
def test_sbpr_step_follows_loss_gradient(neg):
    rng = np.random.default_rng(1)
    emb = EmbeddingTable(rng.normal(size=(3, 2)), rng.normal(size=(3, 5)))
    triple, coef = (0, 1, neg), 2.5
    after = emb.copy()
    sbpr_step(after, 1, triple, 1.0, 0.05, 0.07, coef)  # alpha = 1: the update is the gradient
    f = lambda e: sbpr_loss(e, 1, triple, 0.05, 0.07, coef)
    for which, A0, A1 in (("P", emb.P, after.P), ("Q", emb.Q, after.Q)):
        for idx in itertools.product(range(A0.shape[0]), range(A0.shape[1])):
            num = finite_diff_gradient(f, emb, which, idx)
            assert A0[idx] - A1[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_sbpr_without_shares_matches_bpr():
    ds, _, _, _ = random_instance(np.random.default_rng(2), M=8, N=12, n_shares=0, explicit=False)
    cfg = TrainConfig(K=3, epochs=10, alpha=0.05, seed=3, lambda_s=0.0)
    a = train_sbpr(ds, cfg)
    b, _ = train(ds, cfg)
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.Q, b.Q)


def test_sbpr_with_shares_trains():
    ds, _, _, _ = random_instance(np.random.default_rng(4), M=8, N=12, explicit=False)
    cfg = TrainConfig(K=3, epochs=10, alpha=0.05, seed=3)
    emb = train_sbpr(ds, cfg)
    assert emb.is_finite()
    assert not np.array_equal(emb.P, train(ds, cfg)[0].P)

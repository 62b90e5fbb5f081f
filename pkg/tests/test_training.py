from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from csrec import _kernels as kern
from csrec.data import SocialStrengths
from csrec.model import EmbeddingTable, RegKind, RegularizerSpec, bpr_loss, total_objective
from csrec.training import (
    DivergedError,
    NegativeSampler,
    NoNegativeError,
    TrainConfig,
    Trainer,
    _interleave,
    finite_diff_gradient,
    objective_gradient,
    sample_negative,
    sgd_epoch,
    train,
)

from conftest import GRAD_KINDS, gradient_errors, make_dataset, random_instance


def test_finite_difference_of_square():
    emb = EmbeddingTable(np.array([[3.0]]), np.array([[0.0]]))
    g = finite_diff_gradient(lambda e: float(e.P[0, 0] ** 2), emb, "P", (0, 0))
    assert g == pytest.approx(6.0, abs=1e-6)
    assert emb.P[0, 0] == 3.0


@pytest.mark.parametrize("manner", ["pointwise", "pairwise"])
@pytest.mark.parametrize("kind", GRAD_KINDS)
def test_gradient_matches_finite_differences(manner, kind):
    errs = [e for seed in range(2) for e in gradient_errors(seed, manner, kind)]
    assert max(errs) < 1e-4


# -- single kernel steps equal -alpha * gradient of one record ----------------

def step_instance(seed=0):
    rng = np.random.default_rng(seed)
    return rng, EmbeddingTable(rng.normal(size=(4, 5)), rng.normal(size=(4, 6)))


def test_bpr_step_is_gradient_step():
    _, emb = step_instance()
    ds = make_dataset([1], [2], M=5, N=6)
    spec = RegularizerSpec()
    dP, dQ = objective_gradient(emb, ds, spec, "pairwise", [(1, 2, 4)], 0.1, 0.2)
    P, Q = emb.P.copy(), emb.Q.copy()
    assert kern.bpr_update(P, Q, 1, 2, 4, 0.05, 0.1, 0.2)
    np.testing.assert_allclose(P, emb.P - 0.05 * dP, rtol=0, atol=1e-14)
    np.testing.assert_allclose(Q, emb.Q - 0.05 * dQ, rtol=0, atol=1e-14)


def test_pointwise_step_is_local_gradient_step():
    _, emb = step_instance(1)
    P, Q = emb.P.copy(), emb.Q.copy()
    assert kern.pointwise_update(P, Q, 0, 3, 1.5, 0.05, 0.1, 0.2)
    p, q = emb.P[:, 0], emb.Q[:, 3]
    e = 1.5 - p @ q
    np.testing.assert_allclose(P[:, 0], p - 0.05 * (-2 * e * q + 0.2 * p), atol=1e-14)
    np.testing.assert_allclose(Q[:, 3], q - 0.05 * (-2 * e * p + 0.4 * q), atol=1e-14)
    untouched = np.ones(5, bool)
    untouched[0] = False
    np.testing.assert_array_equal(P[:, untouched], emb.P[:, untouched])


@pytest.mark.parametrize("kind", ["weighted_sum", "sum_weighted_distance", "csr_general", "csr_product_sharing"])
def test_social_step_is_gradient_step(kind):
    rng, emb = step_instance(2)
    ds = make_dataset([0], [0], M=5, N=6, shares=[(1, 3, 2)])
    strengths = SocialStrengths({(1, 3): 0.6})
    weights = {(1, 3): rng.normal(size=4)}
    spec = RegularizerSpec(kind, 0.5, strengths, weights, symmetrize=False)
    dP, dQ = objective_gradient(emb, ds, spec, "pointwise", None, 0.0, 0.0)
    # subtract the interaction part so only the social gradient remains
    dP0, dQ0 = objective_gradient(emb, ds, RegularizerSpec(), "pointwise", None, 0.0, 0.0)
    trainer = Trainer(ds, TrainConfig(manner="pointwise", alpha=0.05, K=4, lambda_s=0.5,
                                      lambda_p=0, lambda_q=0), spec)
    soc = trainer.social
    assert soc.n == 1
    P, Q = emb.P.copy(), emb.Q.copy()
    bad = kern.run_schedule(P, Q, np.array([-1]), False, kern.empty_int(), kern.empty_int(),
                            kern.empty_int(), np.zeros(0), soc.mode, soc.a, soc.b, soc.c, soc.w2,
                            soc.indptr, soc.fidx, soc.fstr, 0.05, 0.0, 0.0, 0.5, False)
    assert bad == -1
    np.testing.assert_allclose(P, emb.P - 0.05 * (dP - dP0), atol=1e-14)
    np.testing.assert_allclose(Q, emb.Q - 0.05 * (dQ - dQ0), atol=1e-14)


def test_freeze_q_keeps_item_factors():
    ds, strengths, _, emb = random_instance(np.random.default_rng(3), explicit=False)
    cfg = TrainConfig(alpha=0.05, K=4, lambda_s=1.0, epochs=0, lambda_q=0.0)
    spec = RegularizerSpec(RegKind.CSR_PRODUCT_SHARING, 1.0, freeze_item_weights=True)
    trainer = Trainer(ds, cfg, spec)
    P, Q = emb.P.copy(), emb.Q.copy()
    soc = trainer.social
    order = -1 - np.arange(soc.n)
    kern.run_schedule(P, Q, order, True, kern.empty_int(), kern.empty_int(), kern.empty_int(),
                      np.zeros(0), soc.mode, soc.a, soc.b, soc.c, soc.w2, soc.indptr, soc.fidx,
                      soc.fstr, 0.05, 0.0, 0.0, 1.0, True)
    np.testing.assert_array_equal(Q, emb.Q)
    assert not np.array_equal(P, emb.P)


# -- schedule ----------------------------------------------------------------

def test_interleave_spreads_social_steps():
    codes = _interleave(6, 3)
    assert sorted(codes.tolist()) == [-3, -2, -1, 0, 1, 2, 3, 4, 5]
    assert codes.tolist() == [0, -1, 1, 2, -2, 3, 4, -3, 5]
    assert _interleave(3, 0).tolist() == [0, 1, 2]


# -- runs --------------------------------------------------------------------

def small_problem(seed=0):
    ds, strengths, weights, _ = random_instance(np.random.default_rng(seed), M=8, N=12, K=3, explicit=False)
    return ds, strengths, weights


def test_training_is_deterministic():
    ds, strengths, _ = small_problem()
    cfg = TrainConfig(K=3, epochs=20, alpha=0.05, seed=4, lambda_s=0.1)
    spec = RegularizerSpec(RegKind.CSR_PRODUCT_SHARING)
    a, la = train(ds, cfg, spec)
    b, lb = train(ds, cfg, spec)
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.Q, b.Q)
    assert [r.total for r in la.rows] == [r.total for r in lb.rows]


def test_zero_learning_rate_changes_nothing():
    ds, _, _ = small_problem()
    cfg = TrainConfig(K=3, epochs=5, alpha=0.0, lambda_s=0.1)
    init, _ = train(ds, replace(cfg, epochs=0), RegularizerSpec(RegKind.CSR_PRODUCT_SHARING))
    out, _ = train(ds, cfg, RegularizerSpec(RegKind.CSR_PRODUCT_SHARING))
    np.testing.assert_array_equal(out.P, init.P)
    np.testing.assert_array_equal(out.Q, init.Q)


def test_zero_epochs_returns_initial_factors():
    ds, _, _ = small_problem()
    emb, log = train(ds, TrainConfig(K=3, epochs=0, seed=9))
    assert emb.P.shape == (3, ds.num_users) and len(log.rows) == 1
    assert np.abs(emb.P).max() < 0.1


@pytest.mark.parametrize("manner", ["pairwise", "pointwise"])
def test_zero_lambda_matches_plain_training(manner):
    ds, strengths, weights = small_problem(1)
    if manner == "pointwise":
        ds = ds.replace(explicit=True)
    cfg = TrainConfig(manner=manner, K=3, epochs=15, alpha=0.05, seed=2, lambda_s=0.0)
    plain, _ = train(ds, cfg, RegularizerSpec())
    for kind in GRAD_KINDS[1:]:
        social, _ = train(ds, cfg, RegularizerSpec(kind, 0.0, strengths, weights))
        assert np.array_equal(social.P, plain.P) and np.array_equal(social.Q, plain.Q), kind


def test_unit_weight_trajectory_matches_sum_weighted_distance():
    ds, strengths, _ = small_problem(2)
    ones = SocialStrengths({p: 1.0 for p in strengths})
    weights = {p: np.ones(3) for p in strengths}
    cfg = TrainConfig(K=3, alpha=0.05, lambda_s=0.3, seed=5, epochs=1)
    a_spec = RegularizerSpec(RegKind.SUM_WEIGHTED_DISTANCE, strengths=ones)
    b_spec = RegularizerSpec(RegKind.CSR_GENERAL, pair_weights=weights)
    ta, tb = Trainer(ds, cfg, a_spec), Trainer(ds, cfg, b_spec)
    a, _ = train(ds, replace(cfg, epochs=0))
    b = a.copy()
    for _ in range(10):
        ta.epoch(a)
        tb.epoch(b)
        assert np.array_equal(a.P, b.P) and np.array_equal(a.Q, b.Q)


def test_full_batch_descent_small_step():
    rng = np.random.default_rng(8)
    ds, strengths, weights, emb = random_instance(rng, M=4, N=6, K=3, explicit=True)
    cfg = TrainConfig(manner="pointwise", K=3, alpha=1e-3, lambda_s=0.5, full_batch=True, epochs=1)
    for kind in GRAD_KINDS:
        spec = RegularizerSpec(kind, 0.5, strengths, weights)
        out = sgd_epoch(emb.copy(), ds, cfg, spec)
        assert out["loss_after"] < out["loss_before"], kind
        assert out["grad_norm"] > 0


def test_training_reduces_objective():
    ds, strengths, _ = small_problem(4)
    cfg = TrainConfig(K=3, epochs=60, alpha=0.05, lambda_s=0.1, init_scale=0.1)
    _, log = train(ds, cfg, RegularizerSpec(RegKind.CSR_PRODUCT_SHARING))
    assert log.rows[-1].total < log.rows[0].total


def test_divergence_raises():
    ds, strengths, _ = small_problem(5)
    cfg = TrainConfig(manner="pointwise", K=3, epochs=50, alpha=10.0, lambda_s=0.0, init_scale=1.0)
    with pytest.raises(DivergedError):
        train(ds.replace(explicit=True, values=np.full(ds.num_interactions, 50.0)), cfg)


def test_log_csv(tmp_path):
    ds, _, _ = small_problem()
    _, log = train(ds, TrainConfig(K=3, epochs=3))
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,interaction_loss,social_term,total,grad_norm"
    assert len(lines) == 5


@pytest.mark.parametrize("bad", [dict(alpha=-1.0), dict(K=0), dict(epochs=-1), dict(manner="listwise"),
                                 dict(negatives_per_positive=0), dict(lambda_p=-0.1)])
def test_invalid_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- negative sampling ----------------------------------------------------------

def test_sample_negative_forced():
    ds = make_dataset([0, 0], [0, 1], M=1, N=3)
    rng = np.random.default_rng(0)
    assert {sample_negative(ds, 0, rng) for _ in range(20)} == {2}


def test_sample_negative_no_candidate():
    ds = make_dataset([0, 0], [0, 1], M=1, N=2)
    with pytest.raises(NoNegativeError):
        sample_negative(ds, 0, np.random.default_rng(0))
    with pytest.raises(NoNegativeError):
        NegativeSampler(ds).sample(np.array([0]), np.random.default_rng(0))


def test_negative_sampler_uniform():
    ds = make_dataset([0, 0], [0, 3], M=1, N=8)
    draws = NegativeSampler(ds).sample(np.zeros(6000, dtype=np.int64), np.random.default_rng(1))
    counts = Counter(draws.tolist())
    assert set(counts) == {1, 2, 4, 5, 6, 7}
    assert chisquare([counts[i] for i in sorted(counts)]).pvalue > 1e-3
    single = Counter(sample_negative(ds, 0, np.random.default_rng(s)) for s in range(3000))
    assert chisquare([single[i] for i in sorted(single)]).pvalue > 1e-3


def test_bpr_step_reduces_its_loss():
    emb = EmbeddingTable(np.array([[0.5], [0.1]]), np.array([[0.2, 0.3], [0.1, -0.2]]))
    before = bpr_loss(emb, (0, 0, 1))
    kern.bpr_update(emb.P, emb.Q, 0, 0, 1, 0.1, 0.0, 0.0)
    assert bpr_loss(emb, (0, 0, 1)) < before


def test_total_objective_fd_on_product_sharing_q():
    rng = np.random.default_rng(11)
    ds, _, _, emb = random_instance(rng, explicit=True)
    spec = RegularizerSpec(RegKind.CSR_PRODUCT_SHARING, 2.0)
    _, dQ = objective_gradient(emb, ds, spec)
    i = int(ds.shares[0, 2])
    num = finite_diff_gradient(lambda e: total_objective(e, ds, spec), emb, "Q", (0, i))
    assert dQ[0, i] == pytest.approx(num, rel=1e-6)

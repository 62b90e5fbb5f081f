"""Model registry and the fit / evaluate / grid-search plumbing shared by the
CLI and the experiment tests."""

from __future__ import annotations

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

from .baselines import MODEL_REGULARIZERS, PopularityModel, rank_random, train_sbpr
from .data import SocialStrengths, Split
from .evaluation import DEFAULT_CUTOFFS, RankingReport, evaluate
from .model import EmbeddingTable, RegKind, RegularizerSpec
from .training import DivergedError, TrainConfig, TrainingLog, train

logger = logging.getLogger(__name__)

MODELS = ("rand", "itempop", "bpr", "sbpr", "socialbpr", "ugpmf", "csr")
TRAINABLE = ("bpr", "sbpr", "socialbpr", "ugpmf", "csr")
SOCIAL = ("socialbpr", "ugpmf", "csr")

DEFAULT_ALPHAS = (0.001, 0.005, 0.01, 0.05)
DEFAULT_KS = (4, 8, 16, 32)
DEFAULT_LAMBDAS = (0.001, 0.01, 0.1, 1.0)


def check_model(name: str) -> str:
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODELS)}")
    return name


def regularizer_for(model: str, strengths: SocialStrengths | None = None, lambda_s: float = 0.0,
                    symmetrize: bool = True, freeze_q: bool = False) -> RegularizerSpec:
    kind = MODEL_REGULARIZERS[model][1] if model in MODEL_REGULARIZERS else RegKind.NONE
    return RegularizerSpec(kind=kind, lambda_s=lambda_s if kind is not RegKind.NONE else 0.0,
                           strengths=strengths, symmetrize=symmetrize, freeze_item_weights=freeze_q)


def fit(model: str, split: Split, config: TrainConfig, strengths: SocialStrengths | None = None,
        symmetrize: bool = True, freeze_q: bool = False) -> tuple[EmbeddingTable, TrainingLog | None]:
    check_model(model)
    if model not in TRAINABLE:
        raise ValueError(f"model {model!r} has no trainable parameters")
    if model == "sbpr":
        return train_sbpr(split.train, config), None
    if model != "csr" and model in MODEL_REGULARIZERS:
        config = replace(config, manner=MODEL_REGULARIZERS[model][0])
    if model not in SOCIAL:
        config = replace(config, lambda_s=0.0)
    spec = regularizer_for(model, strengths, config.lambda_s, symmetrize, freeze_q)
    return train(split.train, config, spec)


def scorer_for(model: str, split: Split, emb: EmbeddingTable | None = None, seed: int = 0):
    check_model(model)
    if model == "rand":
        return lambda u, cands: rank_random(u, cands, seed)
    if model == "itempop":
        return PopularityModel(split.train)
    if emb is None:
        raise ValueError(f"model {model!r} needs embeddings")
    emb.check_bound(split.train)
    return emb


def fit_and_evaluate(model, split, config, strengths=None, cutoffs=DEFAULT_CUTOFFS, candidates="full",
                     symmetrize=True, freeze_q=False) -> tuple[RankingReport, EmbeddingTable | None, TrainingLog | None]:
    emb = log = None
    if model in TRAINABLE:
        emb, log = fit(model, split, config, strengths, symmetrize, freeze_q)
    report = evaluate(scorer_for(model, split, emb, config.seed), split, cutoffs, candidates,
                      seed=config.seed, metadata={"model": model, "seed": config.seed})
    return report, emb, log


@dataclass
class Cell:
    index: int
    alpha: float
    K: int
    lambda_s: float
    status: str = "pending"
    metrics: dict | None = None
    error: str = ""

    def row(self) -> dict:
        out = {"cell": self.index, "alpha": self.alpha, "k": self.K, "lambda_s": self.lambda_s,
               "status": self.status}
        out.update(self.metrics or {})
        return out


def grid_cells(model, alphas, ks, lambdas) -> list[Cell]:
    if model not in TRAINABLE:
        return [Cell(0, 0.0, 0, 0.0)]
    if model not in SOCIAL:
        lambdas = (0.0,)
    if not (alphas and ks and lambdas):
        raise ValueError("sweep grids must be nonempty")
    return [Cell(n, a, k, l) for n, (a, k, l) in enumerate(itertools.product(alphas, ks, lambdas))]


def sweep_threads() -> int:
    cap = os.environ.get("CSR_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def run_sweep(model, split, base: TrainConfig, strengths=None, alphas=DEFAULT_ALPHAS, ks=DEFAULT_KS,
              lambdas=DEFAULT_LAMBDAS, cutoffs=DEFAULT_CUTOFFS, candidates="full", threads=None,
              symmetrize=True, freeze_q=False, on_cell=None) -> list[Cell]:
    """Train and evaluate every grid cell. Each cell owns its tables and its
    random streams (seeded from ``base.seed``), so the order or parallelism
    of execution never changes a result. Diverged cells are marked failed."""
    cells = grid_cells(model, alphas, ks, lambdas)

    def work(cell: Cell) -> Cell:
        cfg = replace(base, alpha=cell.alpha, K=cell.K, lambda_s=cell.lambda_s) if model in TRAINABLE else base
        try:
            report, emb, log = fit_and_evaluate(model, split, cfg, strengths, cutoffs, candidates,
                                                symmetrize, freeze_q)
        except DivergedError as exc:
            cell.status, cell.error = "failed", str(exc)
            logger.warning("cell %d diverged: %s", cell.index, exc)
            return cell
        cell.status, cell.metrics = "ok", report.flat()
        if on_cell is not None:
            on_cell(cell, report, emb, log)
        return cell

    n = threads or sweep_threads()
    if n <= 1 or len(cells) == 1:
        return [work(c) for c in cells]
    with ThreadPoolExecutor(max_workers=min(n, len(cells))) as pool:
        return list(pool.map(work, cells))


def select_best(cells: list[Cell], primary=10) -> Cell | None:
    """Highest HR@primary, then NDCG@primary, then earliest cell."""
    ok = [c for c in cells if c.status == "ok"]
    if not ok:
        return None
    return min(ok, key=lambda c: (-c.metrics[f"HR@{primary}"], -c.metrics[f"NDCG@{primary}"], c.index))

"""
Reference uncertainty estimators.

- mc_dropout: uniform-weight statistics over independent Bernoulli(p) masks
- importance_weighted_estimate: uniform masks reweighted towards the Gibbs
  measure (self-normalised)
- ground_truth_ensemble: R networks retrained from different seeds
"""

import logging
import math
from functools import partial
from typing import Optional, Sequence

import anyio
import numpy as np
from pydantic import BaseModel, Field
from scipy.special import logsumexp

from .config import GibbsParams, TrainConfig
from .data import Dataset
from .errors import LovmeError, NumericError, ParameterError
from .gibbs import cumulants
from .losses import LossOracle
from .nn import Network, Sample, cross_entropy_rows, forward_full_batch, predict_full, sample_keep_bernoulli, softmax
from .sampler import ChainResult, LossTrace, UncertaintyReport, estimate
from .trainer import Trainer
from .utils import derive_int_seed

logger = logging.getLogger(__name__)


def mc_dropout(
    net: Network,
    sample: Sample,
    p: float,
    M: int,
    seed: int,
    oracle: LossOracle = LossOracle(),
    sample_id: int = 0,
) -> ChainResult:
    """M independent Bernoulli(p) thinned networks, each of equal weight.

    Thinned networks are evaluated unscaled, the same way the LoVME chain
    evaluates them, so p = 0.5 samples the uniform measure over masks.
    """
    if M < 2:
        raise ParameterError(f"MC dropout needs M >= 2 masks, got {M}")
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"keep probability p={p} must lie in (0, 1]")
    evaluator = oracle.evaluator(net, sample, sample_id)
    rng = np.random.default_rng(seed)
    keep_matrix = sample_keep_bernoulli((M, evaluator.n0), p, rng)
    losses = evaluator.losses(keep_matrix)
    if not np.all(np.isfinite(losses)):
        raise NumericError(f"non-finite MC dropout loss for sample {sample_id}")
    trace = LossTrace(
        steps=np.arange(1, M + 1, dtype=np.int64),
        losses=losses,
        sizes=keep_matrix.sum(axis=1).astype(np.int64),
        accepted=np.ones(M, dtype=bool),
        accept_count=M,
        propose_count=M,
    )
    report = estimate(trace, predict_full(net, sample.features), sample_id, estimator="mc_dropout")
    return ChainResult(trace, report.model_copy(update={"acceptance_rate": None}))


async def mc_dropout_async(
    net: Network,
    samples: Dataset | Sequence[Sample],
    p: float,
    M: int,
    seed: int,
    oracle: LossOracle = LossOracle(),
    workers: int = 1,
) -> list[ChainResult]:
    """`mc_dropout` for every sample, seeds derived from (seed, sample index)."""
    items = list(samples)
    results: list[Optional[ChainResult]] = [None] * len(items)
    errors: list[Optional[LovmeError]] = [None] * len(items)
    limiter = anyio.CapacityLimiter(workers)

    def work(k: int) -> None:
        try:
            results[k] = mc_dropout(net, items[k], p, M, derive_int_seed(seed, k), oracle, k)
        except LovmeError as e:
            errors[k] = e

    async with anyio.create_task_group() as tg:
        for k in range(len(items)):
            tg.start_soon(partial(anyio.to_thread.run_sync, work, k, limiter=limiter))
    for error in errors:
        if error is not None:
            raise error
    logger.info("MC dropout: %d samples x %d masks at p=%.3g", len(items), M, p)
    return results  # type: ignore[return-value]


def importance_weighted_estimate(
    net: Network,
    sample: Sample,
    params: GibbsParams,
    M: int,
    seed: int,
    oracle: LossOracle = LossOracle(),
    sample_id: int = 0,
) -> UncertaintyReport:
    """Gibbs moments from M uniform masks with weights exp(-(beta L_j + eta N_j))."""
    if M < 2:
        raise ParameterError(f"importance sampling needs M >= 2 masks, got {M}")
    evaluator = oracle.evaluator(net, sample, sample_id)
    rng = np.random.default_rng(seed)
    keep_matrix = sample_keep_bernoulli((M, evaluator.n0), 0.5, rng)
    losses = evaluator.losses(keep_matrix)
    sizes = keep_matrix.sum(axis=1).astype(np.float64)
    log_w = -(params.beta * losses + params.eta * sizes)
    if not np.all(np.isfinite(log_w)):
        raise NumericError(f"non-finite importance weight for sample {sample_id}")
    weights = np.exp(log_w - logsumexp(log_w))
    weights /= math.fsum(weights)
    loss_moments = cumulants(losses, weights)
    size_moments = cumulants(sizes, weights)
    degenerate = loss_moments.variance <= 0.0
    skewness = kurtosis = 0.0
    if not degenerate:
        skewness = loss_moments.kappa3 / loss_moments.variance**1.5
        kurtosis = loss_moments.kappa4 / loss_moments.variance**2
    return UncertaintyReport(
        sample_id=sample_id,
        estimator="importance",
        mean_loss=loss_moments.mean,
        var_loss=max(loss_moments.variance, 0.0),
        var_N=max(size_moments.variance, 0.0),
        skewness=skewness,
        excess_kurtosis=kurtosis,
        degenerate=degenerate,
        h_score=[float(v) for v in predict_full(net, sample.features)],
        n_states=M,
    )


class GroundTruthSample(BaseModel):
    sample_id: int
    mean_probability: float = Field(ge=0.0, le=1.0)
    var_probability: float = Field(ge=0.0)
    mean_loss: float
    var_loss: float = Field(ge=0.0)
    h_score: list[float]


class GroundTruthReport(BaseModel):
    """Per-sample spread of the correct-class probability (and loss) across
    an ensemble of retrained networks."""

    ensemble_size: int = Field(ge=2)
    seeds: list[int]
    samples: list[GroundTruthSample]

    def uncertainties(self) -> np.ndarray:
        return np.array([s.var_probability for s in self.samples])

    def mean_probabilities(self) -> np.ndarray:
        return np.array([s.mean_probability for s in self.samples])


def _mean_var(values: np.ndarray) -> tuple[float, float]:
    """Member-order independent mean and unbiased variance."""
    n = values.size
    mean = math.fsum(values) / n
    return mean, math.fsum((values - mean) ** 2) / (n - 1)


def _summarise(members: list[tuple[np.ndarray, np.ndarray, np.ndarray]], seeds: list[int]) -> GroundTruthReport:
    probabilities = np.stack([m[0] for m in members])
    losses = np.stack([m[1] for m in members])
    h_scores = np.stack([m[2] for m in members])
    samples = []
    for i in range(probabilities.shape[1]):
        mean_p, var_p = _mean_var(probabilities[:, i])
        mean_l, var_l = _mean_var(losses[:, i])
        h = [math.fsum(h_scores[:, i, k]) / len(members) for k in range(h_scores.shape[2])]
        samples.append(
            GroundTruthSample(
                sample_id=i,
                mean_probability=min(max(mean_p, 0.0), 1.0),
                var_probability=max(var_p, 0.0),
                mean_loss=mean_l,
                var_loss=max(var_l, 0.0),
                h_score=h,
            )
        )
    return GroundTruthReport(ensemble_size=len(members), seeds=seeds, samples=samples)


def _member(config: TrainConfig, seed: int, train_data: Dataset, test_data: Dataset):
    net = Trainer(config.model_copy(update={"seed": seed})).fit(train_data)
    logits = forward_full_batch(net, test_data.features)
    probabilities = softmax(logits)
    correct = probabilities[np.arange(len(test_data)), test_data.labels]
    return correct, cross_entropy_rows(logits, test_data.labels), probabilities


async def ground_truth_ensemble_async(
    config: TrainConfig,
    train_data: Dataset,
    test_data: Dataset,
    R: int,
    master_seed: int,
    seeds: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> GroundTruthReport:
    """Train R members that differ only in seed; seeds default to ones
    derived from (master_seed, member index)."""
    if R < 2:
        raise ParameterError(f"a ground-truth ensemble needs R >= 2 members, got {R}")
    seeds = [derive_int_seed(master_seed, r) for r in range(R)] if seeds is None else list(seeds)
    if len(seeds) != R:
        raise ParameterError(f"{len(seeds)} seeds given for an ensemble of {R}")
    members: list = [None] * R
    errors: list[Optional[LovmeError]] = [None] * R
    limiter = anyio.CapacityLimiter(workers)

    def work(r: int) -> None:
        try:
            members[r] = _member(config, seeds[r], train_data, test_data)
        except LovmeError as e:
            errors[r] = e

    async with anyio.create_task_group() as tg:
        for r in range(R):
            tg.start_soon(partial(anyio.to_thread.run_sync, work, r, limiter=limiter))
    for error in errors:
        if error is not None:
            raise error
    logger.info("Trained ground-truth ensemble of %d networks", R)
    return _summarise(members, seeds)


def ground_truth_ensemble(
    config: TrainConfig,
    train_data: Dataset,
    test_data: Dataset,
    R: int,
    master_seed: int,
    seeds: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> GroundTruthReport:
    return anyio.run(
        partial(ground_truth_ensemble_async, config, train_data, test_data, R, master_seed, seeds, workers)
    )

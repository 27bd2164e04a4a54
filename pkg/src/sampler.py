"""
Loss Variance Monte Carlo Estimate (LoVME).

A Metropolis-Hastings chain over thinned networks whose stationary
distribution is the Gibbs measure p_i ∝ exp(-(beta * L_i + eta * N_i)).
The chain starts at the full network; each transition proposes a
candidate mask, evaluates its loss once, and accepts it when
theta < A with theta ~ U(0, 1) and

    A = min(1, exp(-beta (L_v - L_mu) - eta (N_v - N_mu) + log g(v->mu) - log g(mu->v)))
"""

import csv
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import anyio
import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import stats

from .config import ChainConfig, GibbsParams, ProposalKernelName
from .data import Dataset
from .errors import ChainError, LovmeError, NumericError, ParameterError
from .gibbs import unit_counts
from .losses import LossOracle
from .nn import (
    DropoutMask,
    Network,
    Sample,
    count_maskable_units,
    cross_entropy_rows,
    forward_masked_inputs,
    predict_full,
    sample_mask_fixed_size,
)
from .trainer import mean_loss
from .utils import derive_int_seed

logger = logging.getLogger(__name__)


def log_binomial(n: int, k: int) -> float:
    return math.log(math.comb(n, k))


class ProposalKernel(ABC):
    """Selection probabilities g(mu -> v) over masks of a fixed length."""

    name: str
    is_symmetric: bool

    def __init__(self, n0: int):
        if n0 < 1:
            raise ParameterError("a chain needs at least one maskable unit")
        self.n0 = n0

    @abstractmethod
    def propose_keep(self, keep: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        """Candidate keep-vector and log g(v->mu) - log g(mu->v)."""

    @abstractmethod
    def log_density(self, source: np.ndarray, target: np.ndarray) -> float:
        """log g(source -> target); -inf when the move is impossible."""


class SingleFlipKernel(ProposalKernel):
    """Flip one uniformly chosen unit. Symmetric."""

    name = "single_flip"
    is_symmetric = True

    def propose_keep(self, keep: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        candidate = keep.copy()
        j = rng.integers(self.n0)
        candidate[j] = not candidate[j]
        return candidate, 0.0

    def log_density(self, source: np.ndarray, target: np.ndarray) -> float:
        if np.count_nonzero(source != target) != 1:
            return -math.inf
        return -math.log(self.n0)


class SizeResampleKernel(ProposalKernel):
    """Draw N uniformly from {0..N0}, then a uniform mask with N kept units.

    Not symmetric: g(mu -> v) = 1 / ((N0 + 1) C(N0, N_v)), so the
    Hastings correction is log C(N0, N_v) - log C(N0, N_mu).
    """

    name = "size_resample"
    is_symmetric = False

    def propose_keep(self, keep: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        size = int(rng.integers(self.n0 + 1))
        candidate = np.array(sample_mask_fixed_size(self.n0, size, rng).keep)
        current = int(np.count_nonzero(keep))
        return candidate, log_binomial(self.n0, size) - log_binomial(self.n0, current)

    def log_density(self, source: np.ndarray, target: np.ndarray) -> float:
        size = int(np.count_nonzero(target))
        return -math.log(self.n0 + 1) - log_binomial(self.n0, size)


KERNELS: dict[str, type[ProposalKernel]] = {
    SingleFlipKernel.name: SingleFlipKernel,
    SizeResampleKernel.name: SizeResampleKernel,
}


def make_kernel(name: ProposalKernelName, n0: int) -> ProposalKernel:
    try:
        return KERNELS[name](n0)
    except KeyError:
        raise ParameterError(f"unknown proposal kernel '{name}'") from None


@dataclass(frozen=True)
class ThinnedNetworkState:
    mask: DropoutMask
    loss: float
    size: int

    def __post_init__(self):
        if self.size != self.mask.size:
            raise ParameterError(f"state size {self.size} != mask popcount {self.mask.size}")
        if not (math.isfinite(self.loss) and self.loss >= 0.0):
            raise NumericError(f"state loss {self.loss} must be finite and nonnegative")


@dataclass(frozen=True, eq=False)
class LossTrace:
    """Recorded chain states (the array L) plus acceptance bookkeeping."""

    steps: np.ndarray
    losses: np.ndarray
    sizes: np.ndarray
    accepted: np.ndarray
    accept_count: int
    propose_count: int

    def __len__(self) -> int:
        return int(self.losses.shape[0])

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.propose_count if self.propose_count else 0.0

    def csv_rows(self) -> list[list[object]]:
        return [
            [int(step), repr(float(loss)), int(size), int(flag)]
            for step, loss, size, flag in zip(self.steps, self.losses, self.sizes, self.accepted)
        ]

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(TRACE_HEADER)
            writer.writerows(self.csv_rows())


TRACE_HEADER = ["step", "loss", "size", "accepted"]


class UncertaintyReport(BaseModel):
    sample_id: int
    estimator: str = "lovme"
    mean_loss: float
    var_loss: float = Field(ge=0.0)
    var_N: float = Field(ge=0.0)
    skewness: float
    excess_kurtosis: float
    degenerate: bool = False
    h_score: list[float]
    n_states: int
    acceptance_rate: Optional[float] = None

    @field_validator("h_score")
    @classmethod
    def _normalised(cls, value: list[float]) -> list[float]:
        if not value or abs(math.fsum(value) - 1.0) > 1e-9:
            raise ValueError("h_score must be a probability vector")
        return value


def propose(
    current: ThinnedNetworkState, kernel: ProposalKernel | ProposalKernelName, rng: np.random.Generator
) -> tuple[DropoutMask, float]:
    if isinstance(kernel, str):
        kernel = make_kernel(kernel, current.mask.length)
    candidate, log_g_ratio = kernel.propose_keep(np.array(current.mask.keep), rng)
    return DropoutMask(candidate), log_g_ratio


def log_acceptance(delta_loss: float, delta_size: int, params: GibbsParams, log_g_ratio: float = 0.0) -> float:
    return -params.beta * delta_loss - params.eta * delta_size + log_g_ratio


def acceptance_prob(
    state: ThinnedNetworkState, candidate: ThinnedNetworkState, params: GibbsParams, log_g_ratio: float = 0.0
) -> float:
    """Metropolis-Hastings acceptance: 1 for favourable moves, else exp of the log ratio."""
    log_a = log_acceptance(candidate.loss - state.loss, candidate.size - state.size, params, log_g_ratio)
    return 1.0 if log_a >= 0.0 else math.exp(log_a)


def _run(
    loss_of: Callable[[np.ndarray], float], n0: int, config: ChainConfig, sample_id: Optional[int]
) -> LossTrace:
    kernel = make_kernel(config.proposal_kernel, n0)
    params = config.params
    rng = np.random.default_rng(config.seed)

    keep = np.ones(n0, dtype=bool)
    try:
        loss = loss_of(keep)
    except NumericError as e:
        raise ChainError(str(e), step=0, sample_id=sample_id) from e
    size = n0

    capacity = config.recorded_states
    steps = np.empty(capacity, dtype=np.int64)
    losses = np.empty(capacity)
    sizes = np.empty(capacity, dtype=np.int64)
    accepted = np.zeros(capacity, dtype=bool)
    recorded = 0
    accept_count = 0
    for step in range(1, config.transitions + 1):
        candidate, log_g_ratio = kernel.propose_keep(keep, rng)
        candidate_size = int(np.count_nonzero(candidate))
        try:
            candidate_loss = loss_of(candidate)
        except NumericError as e:
            raise ChainError(str(e), step=step, sample_id=sample_id) from e
        log_a = log_acceptance(candidate_loss - loss, candidate_size - size, params, log_g_ratio)
        theta = rng.random()
        took = log_a >= 0.0 or theta < math.exp(log_a)
        if took:
            keep, loss, size = candidate, candidate_loss, candidate_size
            accept_count += 1
        if step > config.burn_in and (step - config.burn_in) % config.thin == 0:
            steps[recorded] = step
            losses[recorded] = loss
            sizes[recorded] = size
            accepted[recorded] = took
            recorded += 1
    return LossTrace(steps, losses, sizes, accepted, accept_count, config.transitions)


def run_chain(
    net: Network,
    sample: Sample,
    config: ChainConfig,
    oracle: LossOracle = LossOracle(),
    sample_id: int = 0,
) -> LossTrace:
    """One LoVME chain on one sample's loss landscape."""
    evaluator = oracle.evaluator(net, sample, sample_id)
    trace = _run(evaluator.loss_keep, evaluator.n0, config, sample_id)
    logger.debug(
        "chain sample=%d: %d states, acceptance %.3f", sample_id, len(trace), trace.acceptance_rate
    )
    return trace


def run_chain_global(
    net: Network, dataset: Dataset, config: ChainConfig, oracle: LossOracle = LossOracle()
) -> LossTrace:
    """Chain over the dataset-mean loss, for global diagnostics."""
    labels = oracle.target_labels(net, dataset)

    def dataset_loss(keep: np.ndarray) -> float:
        logits = forward_masked_inputs(net, DropoutMask(keep), dataset.features)
        return float(cross_entropy_rows(logits, labels).mean())

    return _run(dataset_loss, count_maskable_units(net), config, None)


def estimate(
    trace: LossTrace, h_score: Sequence[float] | np.ndarray, sample_id: int = 0, estimator: str = "lovme"
) -> UncertaintyReport:
    """Sample moments of a loss trace (unbiased variances, Fisher excess kurtosis)."""
    if len(trace) < 2:
        raise ParameterError(f"a trace needs at least 2 states, got {len(trace)}")
    losses = trace.losses
    constant = float(np.ptp(losses)) == 0.0
    degenerate = constant
    skewness = kurtosis = 0.0
    if not constant:
        skewness = float(stats.skew(losses))
        kurtosis = float(stats.kurtosis(losses))
        if not (math.isfinite(skewness) and math.isfinite(kurtosis)):
            skewness = kurtosis = 0.0
            degenerate = True
    return UncertaintyReport(
        sample_id=sample_id,
        estimator=estimator,
        mean_loss=float(np.mean(losses)),
        var_loss=0.0 if constant else float(np.var(losses, ddof=1)),
        var_N=float(np.var(trace.sizes, ddof=1)),
        skewness=skewness,
        excess_kurtosis=kurtosis,
        degenerate=degenerate,
        h_score=[float(v) for v in h_score],
        n_states=len(trace),
        acceptance_rate=trace.acceptance_rate,
    )


@dataclass(frozen=True)
class ChainResult:
    trace: LossTrace
    report: UncertaintyReport


def _as_samples(samples: Dataset | Sequence[Sample]) -> list[Sample]:
    return list(samples) if not isinstance(samples, list) else samples


def run_one(net: Network, sample: Sample, sample_id: int, config: ChainConfig, oracle: LossOracle) -> ChainResult:
    """Chain for sample `sample_id` with its seed derived from (config.seed, sample_id)."""
    own = config.model_copy(update={"seed": derive_int_seed(config.seed, sample_id)})
    trace = run_chain(net, sample, own, oracle, sample_id)
    return ChainResult(trace, estimate(trace, predict_full(net, sample.features), sample_id))


async def run_chains_async(
    net: Network,
    samples: Dataset | Sequence[Sample],
    config: ChainConfig,
    oracle: LossOracle = LossOracle(),
    workers: int = 1,
    sample_ids: Optional[Sequence[int]] = None,
) -> list[ChainResult]:
    """Independent chains, one per sample, on up to `workers` threads.

    Results are ordered by sample and do not depend on scheduling. When
    chains fail, the error of the first failing sample is raised.
    """
    items = _as_samples(samples)
    ids = list(range(len(items))) if sample_ids is None else list(sample_ids)
    results: list[Optional[ChainResult]] = [None] * len(items)
    errors: list[Optional[LovmeError]] = [None] * len(items)
    limiter = anyio.CapacityLimiter(workers)

    def work(k: int) -> None:
        try:
            results[k] = run_one(net, items[k], ids[k], config, oracle)
        except LovmeError as e:
            errors[k] = e

    async with anyio.create_task_group() as tg:
        for k in range(len(items)):
            tg.start_soon(partial(anyio.to_thread.run_sync, work, k, limiter=limiter))
    for error in errors:
        if error is not None:
            raise error
    logger.info("Ran %d chains (%d transitions each) on %d workers", len(items), config.transitions, workers)
    return results  # type: ignore[return-value]


def run_chains_parallel(
    net: Network,
    samples: Dataset | Sequence[Sample],
    config: ChainConfig,
    oracle: LossOracle = LossOracle(),
    workers: int = 1,
) -> list[UncertaintyReport]:
    results = anyio.run(partial(run_chains_async, net, samples, config, oracle, workers))
    return [result.report for result in results]


def default_beta(net: Network, dataset: Dataset, oracle: LossOracle = LossOracle()) -> float:
    """1 / mean full-network loss, so beta * L is of order one."""
    average = mean_loss(net, dataset, oracle.target_labels(net, dataset))
    return 1.0 / max(average, 1e-12)


def transition_matrix(losses: np.ndarray, n0: int, params: GibbsParams, kernel: ProposalKernelName) -> np.ndarray:
    """Exact P(mu -> v) of the implemented kernel + acceptance over all 2^N0
    masks in counting order; rows sum to one."""
    count = 1 << n0
    if losses.shape != (count,):
        raise ParameterError(f"need {count} losses in counting order, got {losses.shape}")
    sizes = unit_counts(n0)
    if kernel == "single_flip":
        matrix = np.zeros((count, count))
        rows = np.arange(count)
        for j in range(n0):
            cols = rows ^ (1 << j)
            log_a = -params.beta * (losses[cols] - losses) - params.eta * (sizes[cols] - sizes)
            matrix[rows, cols] = np.exp(np.minimum(log_a, 0.0)) / n0
    elif kernel == "size_resample":
        log_c = np.array([log_binomial(n0, k) for k in range(n0 + 1)])[sizes]
        log_a = (
            -params.beta * (losses[None, :] - losses[:, None])
            - params.eta * (sizes[None, :] - sizes[:, None])
            + log_c[None, :]
            - log_c[:, None]
        )
        log_g = -math.log(n0 + 1) - log_c[None, :]
        matrix = np.exp(log_g + np.minimum(log_a, 0.0))
        np.fill_diagonal(matrix, 0.0)
    else:
        raise ParameterError(f"unknown proposal kernel '{kernel}'")
    np.fill_diagonal(matrix, 1.0 - matrix.sum(axis=1))
    return matrix


def support_diameter(matrix: np.ndarray) -> int:
    """Smallest k such that every state reaches every other in at most k
    nonzero-probability transitions; raises when the chain is reducible."""
    step = (matrix > 0).astype(np.float64)
    np.fill_diagonal(step, 1.0)
    reach = step.copy()
    for k in range(1, matrix.shape[0] + 1):
        if np.all(reach > 0):
            return k
        reach = np.minimum(reach @ step, 1.0)
    raise ParameterError("transition graph is not irreducible")

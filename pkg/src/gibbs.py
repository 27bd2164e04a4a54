"""
Exact Gibbs ensemble over all 2^N0 thinned networks of a tiny network.

    p_i = exp(-(beta * L_i + eta * N_i)) / Z,   Z = sum_i exp(-(beta * L_i + eta * N_i))

Masks are enumerated in integer counting order (bit j of mask index i
keeps unit j). All probability arithmetic happens in log space and every
moment is accumulated with compensated summation (math.fsum), so the
result does not depend on how the mask range is chunked.
"""

import logging
import math
from functools import partial
from typing import NamedTuple, Optional, Sequence

import anyio
import numpy as np
from pydantic import BaseModel
from scipy.special import logsumexp

from .config import GibbsParams
from .errors import CapacityError, NumericError, ParameterError
from .losses import LossOracle
from .nn import Network, Sample, ThinnedEvaluator, count_maskable_units, masks_for_range

logger = logging.getLogger(__name__)

MAX_ORACLE_UNITS = 22
CHUNK_SIZE = 1 << 14


class Cumulants(NamedTuple):
    mean: float
    variance: float
    kappa3: float
    kappa4: float


class OracleResult(BaseModel):
    n0: int
    params: GibbsParams
    log_Z: float
    mean_loss: float
    mean_N: float
    var_loss: float
    var_N: float
    cumulants_loss: tuple[float, float]

    @property
    def std_loss(self) -> float:
        return math.sqrt(self.var_loss)


def cumulants(values: Sequence[float] | np.ndarray, weights: Optional[Sequence[float] | np.ndarray] = None) -> Cumulants:
    """Mean, variance, kappa3 = mu3 and kappa4 = mu4 - 3 mu2^2 of a weighted point set.

    Weights default to uniform and must sum to 1.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ParameterError("cumulants of an empty sequence are undefined")
    if weights is None:
        weights = np.full(values.size, 1.0 / values.size)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != values.shape:
        raise ParameterError(f"{weights.size} weights for {values.size} values")
    if np.any(weights < 0) or abs(math.fsum(weights) - 1.0) > 1e-9:
        raise ParameterError("weights must be nonnegative and sum to 1")
    mean = math.fsum(weights * values)
    d = values - mean
    d2 = d * d
    mu2 = math.fsum(weights * d2)
    mu3 = math.fsum(weights * d2 * d)
    mu4 = math.fsum(weights * d2 * d2)
    return Cumulants(mean, mu2, mu3, mu4 - 3.0 * mu2 * mu2)


def unit_counts(n0: int) -> np.ndarray:
    """N_i for every mask index i in counting order."""
    indices = np.arange(1 << n0, dtype=np.int64)
    counts = np.zeros(indices.size, dtype=np.int64)
    for j in range(n0):
        counts += (indices >> j) & 1
    return counts


def _check_capacity(net: Network) -> int:
    n0 = count_maskable_units(net)
    if n0 > MAX_ORACLE_UNITS:
        raise CapacityError(f"exact enumeration is capped at N0 = {MAX_ORACLE_UNITS}, network has {n0}")
    return n0


def _chunk_bounds(n0: int) -> list[tuple[int, int]]:
    total = 1 << n0
    return [(start, min(start + CHUNK_SIZE, total)) for start in range(0, total, CHUNK_SIZE)]


def _finite_losses(losses: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(losses)):
        bad = int(np.argmax(~np.isfinite(losses)))
        raise NumericError(f"non-finite loss for mask index {bad}")
    return losses


def mask_losses(net: Network, sample: Sample, oracle: LossOracle = LossOracle(), sample_id: int = 0) -> np.ndarray:
    """L_i for every mask in counting order."""
    n0 = _check_capacity(net)
    evaluator = oracle.evaluator(net, sample, sample_id)
    parts = [evaluator.losses(masks_for_range(n0, start, stop)) for start, stop in _chunk_bounds(n0)]
    return _finite_losses(np.concatenate(parts))


async def mask_losses_async(
    net: Network, sample: Sample, oracle: LossOracle = LossOracle(), sample_id: int = 0, workers: int = 4
) -> np.ndarray:
    """`mask_losses` with mask chunks spread over worker threads."""
    n0 = _check_capacity(net)
    evaluator = oracle.evaluator(net, sample, sample_id)
    bounds = _chunk_bounds(n0)
    parts: list[Optional[np.ndarray]] = [None] * len(bounds)
    limiter = anyio.CapacityLimiter(workers)

    def evaluate(k: int, ev: ThinnedEvaluator) -> None:
        start, stop = bounds[k]
        parts[k] = ev.losses(masks_for_range(n0, start, stop))

    async with anyio.create_task_group() as tg:
        for k in range(len(bounds)):
            tg.start_soon(partial(anyio.to_thread.run_sync, evaluate, k, evaluator, limiter=limiter))
    return _finite_losses(np.concatenate(parts))


def gibbs_log_weights(losses: np.ndarray, sizes: np.ndarray, params: GibbsParams) -> np.ndarray:
    return -(params.beta * losses + params.eta * sizes)


def gibbs_probabilities(losses: np.ndarray, sizes: np.ndarray, params: GibbsParams) -> tuple[np.ndarray, float]:
    """(p_i for every mask, log Z)."""
    log_w = gibbs_log_weights(losses, sizes, params)
    log_z = float(logsumexp(log_w))
    return np.exp(log_w - log_z), log_z


def oracle_from_losses(losses: np.ndarray, params: GibbsParams) -> OracleResult:
    n0 = int(losses.size).bit_length() - 1
    sizes = unit_counts(n0)
    p, log_z = gibbs_probabilities(losses, sizes, params)
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-12:
        raise NumericError(f"Gibbs probabilities sum to {total!r}")
    p = p / total
    loss_moments = cumulants(losses, p)
    size_moments = cumulants(sizes.astype(np.float64), p)
    return OracleResult(
        n0=n0,
        params=params,
        log_Z=log_z,
        mean_loss=loss_moments.mean,
        mean_N=size_moments.mean,
        var_loss=loss_moments.variance,
        var_N=size_moments.variance,
        cumulants_loss=(loss_moments.kappa3, loss_moments.kappa4),
    )


def enumerate_ensemble(
    net: Network, sample: Sample, params: GibbsParams, loss_oracle: LossOracle = LossOracle(), sample_id: int = 0
) -> OracleResult:
    """Exact log Z and loss / size moments under the Gibbs distribution."""
    result = oracle_from_losses(mask_losses(net, sample, loss_oracle, sample_id), params)
    logger.debug("Enumerated 2^%d masks at %s: var_loss=%.6g", result.n0, params, result.var_loss)
    return result


def log_partition(
    net: Network, sample: Sample, params: GibbsParams, loss_oracle: LossOracle = LossOracle(), sample_id: int = 0
) -> float:
    losses = mask_losses(net, sample, loss_oracle, sample_id)
    return float(logsumexp(gibbs_log_weights(losses, unit_counts(_check_capacity(net)), params)))


def exact_distribution(
    net: Network, sample: Sample, params: GibbsParams, loss_oracle: LossOracle = LossOracle(), sample_id: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """(p over all masks in counting order, the losses they were built from)."""
    losses = mask_losses(net, sample, loss_oracle, sample_id)
    p, _ = gibbs_probabilities(losses, unit_counts(_check_capacity(net)), params)
    return p, losses


def second_difference_from_losses(losses: np.ndarray, params: GibbsParams, delta: float) -> float:
    """(log Z(b+d) - 2 log Z(b) + log Z(b-d)) / d^2.

    The two outer terms are taken relative to log Z(b):
    log Z(b +/- d) - log Z(b) = log sum_i p_i exp(-/+ d L_i), evaluated with
    centred losses through expm1/log1p so the O(d) parts cancel exactly
    instead of in floating point.
    """
    if not 1e-6 <= delta <= 1e-2:
        raise ParameterError(f"delta={delta} must lie in [1e-6, 1e-2]")
    n0 = int(losses.size).bit_length() - 1
    p, _ = gibbs_probabilities(losses, unit_counts(n0), params)
    s0 = math.fsum(p)
    centred = losses - math.fsum(p * losses) / s0
    up = math.fsum(p * np.expm1(-delta * centred)) / s0
    down = math.fsum(p * np.expm1(delta * centred)) / s0
    return (math.log1p(up) + math.log1p(down)) / (delta * delta)


def variance_via_logZ(
    net: Network,
    sample: Sample,
    params: GibbsParams,
    delta: float = 1e-4,
    loss_oracle: LossOracle = LossOracle(),
    sample_id: int = 0,
) -> float:
    """Var[L] as the curvature of log Z in beta, by central second difference."""
    return second_difference_from_losses(mask_losses(net, sample, loss_oracle, sample_id), params, delta)

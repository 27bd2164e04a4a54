"""
Decision metrics on top of any uncertainty estimator.

AUCs are computed from integer true/false positive counts and reduced as
an exact fraction, so they coincide with the Mann-Whitney statistic
U / (n_pos * n_neg) with ties counted as one half.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import stats

from .config import UncertaintyScale
from .errors import EvaluationError, ParameterError
from .utils import rejected_count

logger = logging.getLogger(__name__)

CURVE_HEADER = ["threshold", "fpr", "tpr"]
SCATTER_HEADER = ["uncertainty", "mean_correct_probability"]


class EvalRecord(BaseModel):
    """One binary decision: score h for the positive class, label, uncertainty u."""

    model_config = ConfigDict(frozen=True)

    sample_id: int
    h: float = Field(ge=0.0, le=1.0)
    label: int = Field(ge=0, le=1)
    u: float = Field(default=0.0, ge=0.0)


class ScoredSample(BaseModel):
    """A multiclass prediction with its uncertainty, before one-vs-rest reduction."""

    model_config = ConfigDict(frozen=True)

    sample_id: int
    probabilities: tuple[float, ...]
    label: int = Field(ge=0)
    u: float = Field(default=0.0, ge=0.0)


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple[float, ...]
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    auc: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))

    def csv_rows(self) -> list[list[str]]:
        return [[repr(t), repr(f), repr(p)] for t, f, p in zip(self.thresholds, self.fpr, self.tpr)]


def roc_auc(records: Sequence[EvalRecord]) -> RocCurve:
    """Threshold sweep over distinct scores, highest first; equal scores form one step."""
    scores = np.array([r.h for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(f"ROC needs both classes, got {n_pos} positive and {n_neg} negative")

    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    last_of_group = np.flatnonzero(np.diff(scores) != 0.0)
    ends = np.append(last_of_group, scores.size - 1)
    tp = np.concatenate([[0], np.cumsum(labels)[ends]]).astype(np.int64)
    fp = np.concatenate([[0], np.cumsum(1 - labels)[ends]]).astype(np.int64)

    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = float(Fraction(twice_area, 2 * n_pos * n_neg))
    return RocCurve(
        thresholds=(math.inf, *(float(s) for s in scores[ends])),
        fpr=tuple(float(v) for v in fp / n_neg),
        tpr=tuple(float(v) for v in tp / n_pos),
        auc=auc,
    )


def _shifted(records: Sequence[EvalRecord], sign: float) -> list[EvalRecord]:
    out = []
    for r in records:
        direction = sign if r.label == 1 else -sign
        h = min(1.0, max(0.0, r.h + direction * r.u))
        out.append(r.model_copy(update={"h": h}))
    return out


def band_roc(records: Sequence[EvalRecord]) -> tuple[RocCurve, RocCurve]:
    """(optimistic, pessimistic): every score moved by u towards / away from its label."""
    return roc_auc(_shifted(records, 1.0)), roc_auc(_shifted(records, -1.0))


def _keep_after_rejection(items: Sequence, k: int) -> list:
    """Drop the k items with highest u; among equal u the lower sample_id goes first."""
    ranked = sorted(items, key=lambda r: (-r.u, r.sample_id))
    rejected = {r.sample_id for r in ranked[:k]}
    return [r for r in items if r.sample_id not in rejected]


def rejection_auc(records: Sequence[EvalRecord], q: float) -> tuple[RocCurve, float]:
    """ROC after answering "don't know" on the ceil(q n) most uncertain records."""
    if not 0.0 <= q < 1.0:
        raise ParameterError(f"rejection quantile q={q} must lie in [0, 1)")
    kept = _keep_after_rejection(records, rejected_count(q, len(records)))
    return roc_auc(kept), len(kept) / len(records)


def rejection_auc_threshold(records: Sequence[EvalRecord], tau: float) -> tuple[RocCurve, float]:
    """ROC on the records with u <= tau."""
    kept = [r for r in records if r.u <= tau]
    if not kept:
        raise EvaluationError(f"threshold {tau} rejects every record")
    return roc_auc(kept), len(kept) / len(records)


class CorrelationResult(BaseModel):
    n: int
    pearson_r: float
    p_value: float
    degenerate: bool
    cutoff: float
    n_below_cutoff: int
    pearson_r_below_cutoff: Optional[float] = None
    p_value_below_cutoff: Optional[float] = None


def _pearson(u: np.ndarray, p: np.ndarray) -> tuple[float, float, bool]:
    if np.ptp(u) == 0.0 or np.ptp(p) == 0.0:
        return 0.0, 1.0, True
    result = stats.pearsonr(u, p)
    return float(result.statistic), float(result.pvalue), False


def uncertainty_correlation(
    pairs: Sequence[tuple[float, float]], cutoff: float = 1.0
) -> CorrelationResult:
    """Pearson r between uncertainty and mean correct-class probability,
    overall and on the samples whose probability lies below `cutoff`."""
    if len(pairs) < 3:
        raise EvaluationError(f"correlation needs at least 3 pairs, got {len(pairs)}")
    data = np.asarray(pairs, dtype=np.float64)
    u, p = data[:, 0], data[:, 1]
    r, p_value, degenerate = _pearson(u, p)
    if degenerate:
        logger.warning("Zero-variance input to the uncertainty correlation; reporting r = 0")

    below = p < cutoff
    r_below = p_below = None
    if int(below.sum()) >= 3:
        r_b, p_b, _ = _pearson(u[below], p[below])
        r_below, p_below = r_b, p_b
    return CorrelationResult(
        n=len(pairs),
        pearson_r=r,
        p_value=p_value,
        degenerate=degenerate,
        cutoff=cutoff,
        n_below_cutoff=int(below.sum()),
        pearson_r_below_cutoff=r_below,
        p_value_below_cutoff=p_below,
    )


def scatter_rows(pairs: Sequence[tuple[float, float]]) -> list[list[str]]:
    return [[repr(float(u)), repr(float(p))] for u, p in pairs]


def multiclass_to_binary(records: Sequence[ScoredSample], target_class: int) -> list[EvalRecord]:
    """One-vs-rest: h = probability of `target_class`, label = (label == target_class)."""
    out = []
    for r in records:
        if not 0 <= target_class < len(r.probabilities):
            raise ParameterError(f"target class {target_class} out of range for {len(r.probabilities)} classes")
        out.append(
            EvalRecord(
                sample_id=r.sample_id,
                h=min(1.0, max(0.0, float(r.probabilities[target_class]))),
                label=int(r.label == target_class),
                u=r.u,
            )
        )
    return out


def normalize_uncertainty(values: Sequence[float] | np.ndarray, mode: UncertaintyScale = "minmax") -> np.ndarray:
    """Map raw Var[L] values to band half-widths.

    minmax rescales to [0, 1] across the evaluation set (all zeros when
    constant), raw keeps the variance, std takes its square root.
    """
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ParameterError("uncertainties must be finite and nonnegative")
    if mode == "raw":
        return values.copy()
    if mode == "std":
        return np.sqrt(values)
    if mode == "minmax":
        if values.size == 0:
            return values.copy()
        span = float(values.max() - values.min())
        if span == 0.0:
            return np.zeros_like(values)
        return (values - values.min()) / span
    raise ParameterError(f"unknown uncertainty scale '{mode}'")


class MacroAuc(BaseModel):
    per_class: list[Optional[float]]
    macro: float


def _macro(
    scored: Sequence[ScoredSample], class_count: int, metric: Callable[[list[EvalRecord]], float]
) -> MacroAuc:
    per_class: list[Optional[float]] = []
    for k in range(class_count):
        binary = multiclass_to_binary(scored, k)
        positives = sum(r.label for r in binary)
        if positives == 0 or positives == len(binary):
            logger.debug("class %d is absent or alone; no one-vs-rest AUC", k)
            per_class.append(None)
            continue
        per_class.append(metric(binary))
    defined = [v for v in per_class if v is not None]
    if not defined:
        raise EvaluationError("no class has both positive and negative samples")
    return MacroAuc(per_class=per_class, macro=math.fsum(defined) / len(defined))


def macro_auc(scored: Sequence[ScoredSample], class_count: int) -> MacroAuc:
    """Per-class one-vs-rest AUCs and their unweighted mean over the defined classes."""
    return _macro(scored, class_count, lambda rs: roc_auc(rs).auc)


class AucBreakdown(BaseModel):
    n: int
    auc: float
    auc_optimistic: float
    auc_pessimistic: float
    per_class_auc: list[Optional[float]]
    auc_rejected: dict[str, Optional[float]]
    kept_fraction: dict[str, float]


class EstimatorSummary(BaseModel):
    estimator: str
    pooled: AucBreakdown
    perturbed: Optional[AucBreakdown] = None
    correlation: Optional[CorrelationResult] = None


def _breakdown(scored: list[ScoredSample], class_count: int, quantiles: Sequence[float]) -> AucBreakdown:
    base = macro_auc(scored, class_count)
    optimistic = _macro(scored, class_count, lambda rs: band_roc(rs)[0].auc)
    pessimistic = _macro(scored, class_count, lambda rs: band_roc(rs)[1].auc)
    rejected: dict[str, Optional[float]] = {}
    kept_fraction: dict[str, float] = {}
    for q in quantiles:
        key = repr(float(q))
        kept = _keep_after_rejection(scored, rejected_count(q, len(scored)))
        kept_fraction[key] = len(kept) / len(scored)
        try:
            rejected[key] = macro_auc(kept, class_count).macro
        except EvaluationError as e:
            logger.warning("AUC after rejecting q=%s is undefined: %s", q, e)
            rejected[key] = None
    return AucBreakdown(
        n=len(scored),
        auc=base.macro,
        auc_optimistic=optimistic.macro,
        auc_pessimistic=pessimistic.macro,
        per_class_auc=base.per_class,
        auc_rejected=rejected,
        kept_fraction=kept_fraction,
    )


def evaluate_estimator(
    estimator: str,
    scored: Sequence[ScoredSample],
    class_count: int,
    quantiles: Sequence[float],
    perturbed_ids: Optional[Sequence[int]] = None,
) -> EstimatorSummary:
    """Base, band and rejected macro AUCs, pooled and on the perturbed subset.

    `scored` carries band half-widths already normalised with
    `normalize_uncertainty`.
    """
    scored = list(scored)
    pooled = _breakdown(scored, class_count, quantiles)
    perturbed = None
    if perturbed_ids:
        chosen = set(perturbed_ids)
        subset = [s for s in scored if s.sample_id in chosen]
        try:
            perturbed = _breakdown(subset, class_count, quantiles)
        except EvaluationError as e:
            logger.warning("Perturbed-only breakdown for %s is undefined: %s", estimator, e)
    logger.info("%s: macro AUC %.4f (%d samples)", estimator, pooled.auc, pooled.n)
    return EstimatorSummary(estimator=estimator, pooled=pooled, perturbed=perturbed)

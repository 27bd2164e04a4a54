"""
Tests for MC dropout, importance reweighting and the retrained-ensemble ground truth.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from src.baselines import (
    ground_truth_ensemble,
    ground_truth_ensemble_async,
    importance_weighted_estimate,
    mc_dropout,
    mc_dropout_async,
)
from src.config import GibbsParams, TrainConfig
from src.data import synth_blobs
from src.errors import ParameterError, TrainingError
from src.gibbs import enumerate_ensemble
from src.losses import LossOracle
from src.utils import derive_int_seed

SMALL = TrainConfig(hidden_widths=(6,), epochs=3, batch_size=16)


class TestMcDropout:
    """Uniform-weight statistics over Bernoulli masks."""

    def test_keep_everything_has_no_spread(self, tiny_net, tiny_sample):
        """Test p = 1 always evaluates the full network."""
        result = mc_dropout(tiny_net, tiny_sample, p=1.0, M=50, seed=0)
        assert result.report.var_loss == 0.0
        assert result.report.degenerate
        assert np.all(result.trace.sizes == 6)

    def test_same_seed_same_trace(self, tiny_net, tiny_sample):
        """Test the seed fixes every mask."""
        a = mc_dropout(tiny_net, tiny_sample, p=0.5, M=200, seed=3)
        b = mc_dropout(tiny_net, tiny_sample, p=0.5, M=200, seed=3)
        assert np.array_equal(a.trace.losses, b.trace.losses)

    def test_report_schema(self, tiny_net, tiny_sample):
        """Test the report is labelled and carries no acceptance rate."""
        report = mc_dropout(tiny_net, tiny_sample, p=0.5, M=100, seed=1, sample_id=7).report
        assert report.estimator == "mc_dropout"
        assert report.acceptance_rate is None
        assert report.sample_id == 7
        assert report.n_states == 100

    @pytest.mark.parametrize("widths,seed", [((4, 2), 3), ((3, 3), 5), ((8,), 6)])
    def test_matches_uniform_measure(self, make_net, tiny_sample, widths, seed):
        """Test the p = 0.5 mean loss is within 3 standard errors of the beta = eta = 0 mean."""
        net = make_net(widths, seed=seed)
        oracle = enumerate_ensemble(net, tiny_sample, GibbsParams(beta=0.0, eta=0.0))
        M = 20_000
        report = mc_dropout(net, tiny_sample, p=0.5, M=M, seed=11).report
        assert abs(report.mean_loss - oracle.mean_loss) <= 3 * math.sqrt(oracle.var_loss / M)

    @pytest.mark.parametrize("M,p", [(1, 0.5), (10, 0.0), (10, 1.5)])
    def test_invalid_arguments(self, tiny_net, tiny_sample, M, p):
        """Test M < 2 and p outside (0, 1] raise ParameterError."""
        with pytest.raises(ParameterError):
            mc_dropout(tiny_net, tiny_sample, p=p, M=M, seed=0)

    async def test_per_sample_seeds(self, tiny_net, noisy_blobs):
        """Test sample k uses the seed derived from (seed, k) regardless of workers."""
        samples = [noisy_blobs.sample(i) for i in range(5)]
        results = await mc_dropout_async(tiny_net, samples, p=0.5, M=64, seed=9, workers=3)
        for k, result in enumerate(results):
            alone = mc_dropout(tiny_net, samples[k], 0.5, 64, derive_int_seed(9, k), LossOracle(), k)
            assert np.array_equal(result.trace.losses, alone.trace.losses)
            assert result.report.sample_id == k


class TestImportanceWeighted:
    """Uniform masks reweighted to the Gibbs measure."""

    @pytest.mark.parametrize("params", [GibbsParams(beta=0.5, eta=0.1), GibbsParams(beta=1.0, eta=-0.2)])
    def test_converges_to_oracle(self, tiny_net, tiny_sample, params):
        """Test 50,000 reweighted masks recover the exact mean and variance."""
        oracle = enumerate_ensemble(tiny_net, tiny_sample, params)
        report = importance_weighted_estimate(tiny_net, tiny_sample, params, M=50_000, seed=2)
        assert report.estimator == "importance"
        assert report.mean_loss == pytest.approx(oracle.mean_loss, rel=0.03)
        assert report.var_loss == pytest.approx(oracle.var_loss, rel=0.1)

    def test_beta_zero_is_plain_average(self, tiny_net, tiny_sample):
        """Test beta = eta = 0 weighs every draw equally."""
        plain = mc_dropout(tiny_net, tiny_sample, p=0.5, M=500, seed=4).trace.losses
        report = importance_weighted_estimate(tiny_net, tiny_sample, GibbsParams(beta=0.0), M=500, seed=4)
        assert report.mean_loss == pytest.approx(math.fsum(plain) / 500, rel=1e-12)

    def test_too_few_masks(self, tiny_net, tiny_sample):
        """Test M < 2 raises ParameterError."""
        with pytest.raises(ParameterError):
            importance_weighted_estimate(tiny_net, tiny_sample, GibbsParams(), M=1, seed=0)


class TestGroundTruth:
    """Ensemble of networks retrained from different seeds."""

    @pytest.fixture
    def split(self):
        train = synth_blobs(80, 2, 0.8, 0.1, seed=1)
        test = replace(synth_blobs(20, 2, 0.8, 0.0, seed=2), split="test")
        return train, test

    def test_identical_seeds_have_zero_variance(self, split):
        """Test two members with the same forced seed agree exactly."""
        report = ground_truth_ensemble(SMALL, *split, R=2, master_seed=0, seeds=[5, 5])
        assert all(s.var_probability == 0.0 for s in report.samples)
        assert all(s.var_loss == 0.0 for s in report.samples)

    def test_member_order_does_not_matter(self, split):
        """Test permuting the member seeds leaves every per-sample statistic unchanged."""
        forward = ground_truth_ensemble(SMALL, *split, R=3, master_seed=0, seeds=[1, 2, 3])
        backward = ground_truth_ensemble(SMALL, *split, R=3, master_seed=0, seeds=[3, 2, 1])
        assert forward.samples == backward.samples

    def test_report_ranges(self, split):
        """Test probabilities lie in [0, 1] and variances are nonnegative."""
        report = ground_truth_ensemble(SMALL, *split, R=3, master_seed=4)
        assert report.ensemble_size == 3
        assert len(report.samples) == 20
        assert np.all((report.mean_probabilities() >= 0) & (report.mean_probabilities() <= 1))
        assert np.all(report.uncertainties() >= 0)

    def test_derived_seeds(self, split):
        """Test default member seeds come from (master_seed, member index)."""
        report = ground_truth_ensemble(SMALL, *split, R=2, master_seed=6)
        assert report.seeds == [derive_int_seed(6, 0), derive_int_seed(6, 1)]

    async def test_workers_do_not_change_result(self, split):
        """Test parallel members merge into the same report."""
        serial = await ground_truth_ensemble_async(SMALL, *split, R=3, master_seed=2, workers=1)
        threaded = await ground_truth_ensemble_async(SMALL, *split, R=3, master_seed=2, workers=3)
        assert serial == threaded

    def test_divergence_names_seed(self, split):
        """Test a diverging member raises TrainingError carrying its seed."""
        train, test = split
        huge = replace(train, features=train.features * 1e154)
        with pytest.raises(TrainingError) as exc_info:
            ground_truth_ensemble(SMALL, huge, test, R=2, master_seed=0, seeds=[11, 12])
        assert exc_info.value.seed == 11

    @pytest.mark.parametrize("R,seeds", [(1, None), (3, [1, 2])])
    def test_invalid_ensemble(self, split, R, seeds):
        """Test R < 2 or a seed count mismatch raises ParameterError."""
        with pytest.raises(ParameterError):
            ground_truth_ensemble(SMALL, *split, R=R, master_seed=0, seeds=seeds)

    @pytest.mark.slow
    def test_label_noise_raises_ensemble_spread(self):
        """Test a label-noised training copy gives a higher median variance than the clean data."""
        clean = synth_blobs(200, 2, 0.5, 0.0, seed=7)
        noisy = synth_blobs(200, 2, 0.5, 0.3, seed=7)
        test = replace(synth_blobs(60, 2, 0.5, 0.0, seed=8), split="test")
        config = TrainConfig(hidden_widths=(8,), epochs=10)
        clean_report = ground_truth_ensemble(config, clean, test, R=20, master_seed=1)
        noisy_report = ground_truth_ensemble(config, noisy, test, R=20, master_seed=1)
        assert np.median(clean_report.uncertainties()) < np.median(noisy_report.uncertainties())

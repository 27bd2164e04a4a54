"""
Integration tests for the experiment pipeline and its manifest.
"""

import hashlib
import json

import numpy as np
import pytest

from src.config import ExperimentConfig
from src.errors import ConfigError, StageError
from src.experiment import (
    CLEANUP_POLICY,
    COMMAND_STAGES,
    MANIFEST_NAME,
    MANIFEST_SCHEMA,
    WEIGHTS_CONFIG_NAME,
    WEIGHTS_NAME,
    ExperimentRunner,
    pipeline_stages,
    run_experiment,
)
from src.weights import load_weights
from tests.conftest import write_idx


def read_manifest(root):
    return json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))


def idx_config(idx_files, tmp_path, **updates):
    images, labels = (str(p) for p in idx_files)
    values = dict(
        dataset_source="idx",
        train_images=images,
        train_labels=labels,
        test_images=images,
        test_labels=labels,
        class_count=3,
        train_size=10,
        test_size=10,
        hidden_widths=(4,),
        epochs=2,
        transitions=100,
        burn_in=10,
        mc_samples=50,
        rejection_quantiles=(0.1,),
        output_dir=str(tmp_path / "idx-run"),
    )
    values.update(updates)
    return ExperimentConfig(**values)


@pytest.mark.integration
class TestPipeline:
    """End-to-end runs on small configurations."""

    async def test_minimal_synthetic_run(self, quick_config):
        """Test the default pipeline writes weights, traces, reports, curves and a manifest."""
        root = await run_experiment(quick_config)
        for name in (
            "weights.tnlw",
            "train_log.csv",
            "test_set.csv",
            "reports/lovme.json",
            "reports/mc_dropout.json",
            "traces/lovme/sample_0.csv",
            "traces/mc_dropout/sample_23.csv",
            "summary.json",
            "curves/lovme_class0.csv",
            "curves/lovme_class1_optimistic.csv",
            "curves/mc_dropout_class1_pessimistic.csv",
        ):
            assert (root / name).is_file(), name
        assert len(load_weights(root / "weights.tnlw").layers) == 2

    async def test_manifest_contents(self, quick_config):
        """Test the manifest records schema, config, seeds, stages and output hashes."""
        runner = ExperimentRunner(quick_config)
        manifest = await runner.run()
        assert manifest == read_manifest(runner.store.root)
        assert manifest["schema"] == MANIFEST_SCHEMA
        assert manifest["status"] == "complete"
        assert manifest["cleanup_policy"] == CLEANUP_POLICY
        assert manifest["stages"] == pipeline_stages(quick_config)
        assert ExperimentConfig.model_validate(manifest["config"]) == quick_config
        assert manifest["seeds"]["chain_seed"] == quick_config.chain_seed
        assert manifest["beta"] > 0
        for name, digest in manifest["outputs"].items():
            assert hashlib.sha256((runner.store.root / name).read_bytes()).hexdigest() == digest

    async def test_summary_schema(self, quick_config):
        """Test summary.json carries pooled AUCs and rejection results for each estimator."""
        root = await run_experiment(quick_config)
        summary = json.loads((root / "summary.json").read_text(encoding="utf-8"))
        assert set(summary["estimators"]) == {"lovme", "mc_dropout"}
        pooled = summary["estimators"]["lovme"]["pooled"]
        assert pooled["n"] == 24
        assert pooled["auc_pessimistic"] <= pooled["auc"] <= pooled["auc_optimistic"]
        assert set(pooled["auc_rejected"]) == {"0.1"}

    async def test_rerun_from_manifest_is_bit_identical(self, quick_config, tmp_path):
        """Test rerunning a manifest's config with a different worker count reproduces every output hash."""
        config = quick_config.model_copy(update={"estimators": ("lovme", "mc_dropout", "ground_truth")})
        first = ExperimentRunner(config)
        manifest = await first.run()
        again = ExperimentConfig.from_manifest(first.store.root / MANIFEST_NAME).model_copy(
            update={"output_dir": str(tmp_path / "again"), "workers": 4}
        )
        second = await ExperimentRunner(again).run()
        assert second["outputs"] == manifest["outputs"]
        assert second["seeds"] == manifest["seeds"]

    async def test_ground_truth_correlation(self, quick_config):
        """Test a ground-truth ensemble adds the correlation study and member seeds."""
        config = quick_config.model_copy(update={"estimators": ("lovme", "ground_truth")})
        runner = ExperimentRunner(config)
        manifest = await runner.run()
        assert len(manifest["seeds"]["ensemble_member_seeds"]) == 2
        assert runner.summaries["lovme"].correlation is not None
        assert runner.summaries["ground_truth"].correlation is None
        assert (runner.store.root / "correlation.csv").is_file()

    async def test_eval_reuses_stored_reports(self, quick_config):
        """Test a separate eval invocation picks up the reports of an earlier lovme invocation."""
        config = quick_config.model_copy(update={"estimators": ("lovme",)})
        await ExperimentRunner(config).run(COMMAND_STAGES["lovme"])
        runner = ExperimentRunner(config)
        manifest = await runner.run(COMMAND_STAGES["eval"])
        assert set(runner.summaries) == {"lovme"}
        assert "reports/lovme.json" in manifest["outputs"]
        assert runner.trainer is None

    async def test_stage_commands_load_saved_weights(self, quick_config):
        """Test a stage command after `train` loads weights.tnlw and leaves it byte-identical."""
        first = ExperimentRunner(quick_config)
        await first.run(COMMAND_STAGES["train"])
        weights = first.store.path(WEIGHTS_NAME)
        trained = weights.read_bytes()
        assert json.loads(first.store.path(WEIGHTS_CONFIG_NAME).read_text(encoding="utf-8"))["epochs"] == 5
        runner = ExperimentRunner(quick_config)
        manifest = await runner.run(COMMAND_STAGES["mc-dropout"])
        assert weights.read_bytes() == trained
        assert runner.net == load_weights(weights)
        assert runner.beta == first.beta
        assert manifest["outputs"][WEIGHTS_NAME] == hashlib.sha256(trained).hexdigest()

    async def test_stage_command_trains_without_saved_weights(self, quick_config):
        """Test a stage command in an empty directory trains and saves a network first."""
        runner = ExperimentRunner(quick_config.model_copy(update={"estimators": ("lovme",)}))
        await runner.run(COMMAND_STAGES["lovme"])
        assert runner.trainer is not None
        assert runner.store.path(WEIGHTS_NAME).is_file()
        assert runner.store.path(WEIGHTS_CONFIG_NAME).is_file()

    async def test_idx_weights_ignore_test_size(self, idx_files, tmp_path):
        """Test a different test split size on separate IDX files still reuses the trained weights."""
        await ExperimentRunner(idx_config(idx_files, tmp_path)).run(COMMAND_STAGES["train"])
        runner = ExperimentRunner(idx_config(idx_files, tmp_path, test_size=6, estimators=("lovme",)))
        await runner.run(COMMAND_STAGES["lovme"])
        assert runner.trainer is None
        assert len(runner.reports["lovme"]) == 6

    async def test_traces_can_be_skipped(self, quick_config):
        """Test write_traces = false writes reports only."""
        config = quick_config.model_copy(update={"write_traces": False, "estimators": ("lovme",)})
        root = await run_experiment(config, COMMAND_STAGES["lovme"])
        assert (root / "reports/lovme.json").is_file()
        assert not (root / "traces").exists()

    async def test_idx_pipeline_with_perturbation(self, idx_files, tmp_path):
        """Test IDX data with perturbed test images yields pooled and perturbed breakdowns."""
        config = idx_config(idx_files, tmp_path, perturb_fraction=0.5)
        runner = ExperimentRunner(config)
        await runner.run()
        summary = json.loads((runner.store.root / "summary.json").read_text(encoding="utf-8"))
        assert len(summary["perturbed_ids"]) == 5
        assert summary["class_count"] == 3
        assert "perturbed" in summary["estimators"]["lovme"]

    async def test_oracle_check(self, quick_config):
        """Test the oracle check compares exact moments with the chain on every grid point."""
        config = quick_config.model_copy(
            update={
                "oracle_hidden_widths": (4,),
                "oracle_betas": (1.0,),
                "oracle_etas": (0.0, 0.25),
                "oracle_states": 3000,
            }
        )
        runner = ExperimentRunner(config)
        manifest = await runner.run(COMMAND_STAGES["oracle-check"])
        payload = json.loads((runner.store.root / "oracle_check.json").read_text(encoding="utf-8"))
        assert payload["n0"] == 4
        assert len(payload["oracle"]) == len(payload["comparison"]) == 2
        for row in payload["comparison"]:
            assert row["var_via_logZ"] == pytest.approx(row["exact_var_loss"], rel=1e-6)
            assert row["lovme_mean_loss"] == pytest.approx(row["exact_mean_loss"], rel=0.2)
        assert len(manifest["seeds"]["oracle_check_chain_seeds"]) == 2


@pytest.mark.integration
class TestFailures:
    """Stage errors and the partial-run manifest."""

    async def test_bad_data_file_marks_stage(self, idx_files, tmp_path):
        """Test a malformed IDX file fails the data stage with exit code 3 and a failed manifest."""
        broken = write_idx(tmp_path / "broken.idx", 0x00000801, (1, 1, 1), bytes(1))
        config = idx_config(idx_files, tmp_path, test_images=str(broken))
        runner = ExperimentRunner(config)
        with pytest.raises(StageError) as exc_info:
            await runner.run()
        assert exc_info.value.stage == "data"
        assert exc_info.value.exit_code == 3
        manifest = read_manifest(runner.store.root)
        assert (manifest["status"], manifest["stage"]) == ("failed", "data")
        assert manifest["cleanup_policy"] == CLEANUP_POLICY

    async def test_partial_outputs_are_kept(self, quick_config):
        """Test outputs of completed stages survive a later failure and stay hashed."""
        config = quick_config.model_copy(update={"estimators": ("lovme",), "oracle_hidden_widths": (12, 11)})
        runner = ExperimentRunner(config)
        with pytest.raises(StageError) as exc_info:
            await runner.run(["data", "train", "lovme", "eval", "oracle_check"])
        assert exc_info.value.exit_code == 2
        manifest = read_manifest(runner.store.root)
        assert manifest["stages"] == ["data", "train", "lovme", "eval"]
        assert manifest["stage"] == "oracle_check"
        assert "reports/lovme.json" in manifest["outputs"]

    async def test_mismatched_weights_are_not_replaced(self, quick_config):
        """Test weights trained under other settings fail the model stage with exit code 2, untouched."""
        await ExperimentRunner(quick_config).run(COMMAND_STAGES["train"])
        runner = ExperimentRunner(quick_config.model_copy(update={"epochs": 9, "hidden_widths": (7,)}))
        trained = runner.store.path(WEIGHTS_NAME).read_bytes()
        with pytest.raises(StageError) as exc_info:
            await runner.run(COMMAND_STAGES["lovme"])
        assert exc_info.value.stage == "model"
        assert exc_info.value.exit_code == 2
        assert "epochs, hidden_widths" in str(exc_info.value)
        assert runner.store.path(WEIGHTS_NAME).read_bytes() == trained

    async def test_weights_without_settings_record(self, quick_config):
        """Test weights.tnlw with no record of its training settings is refused."""
        await ExperimentRunner(quick_config).run(COMMAND_STAGES["train"])
        runner = ExperimentRunner(quick_config)
        runner.store.path(WEIGHTS_CONFIG_NAME).unlink()
        with pytest.raises(StageError) as exc_info:
            await runner.run(COMMAND_STAGES["eval"])
        assert (exc_info.value.stage, exc_info.value.exit_code) == ("model", 2)

    async def test_missing_paths(self, tmp_path):
        """Test missing input files are reported before any stage runs."""
        config = ExperimentConfig(dataset_source="csv", output_dir=str(tmp_path / "run"))
        with pytest.raises(ConfigError):
            await ExperimentRunner(config).run()
        assert not (tmp_path / "run").exists()


@pytest.mark.slow
@pytest.mark.integration
class TestLabelNoiseStudy:
    """Direction of the rejection and correlation results on noised blobs."""

    def noised(self, tmp_path, seed, **updates):
        values = dict(
            train_size=400,
            test_size=200,
            synth_label_noise_rate=0.1,
            hidden_widths=(16, 8),
            epochs=15,
            transitions=600,
            burn_in=100,
            loss_oracle="true_label",
            estimators=("lovme",),
            rejection_quantiles=(0.1,),
            data_seed=seed,
            train_seed=seed,
            chain_seed=seed,
            output_dir=str(tmp_path / f"noise-{seed}"),
        )
        values.update(updates)
        return ExperimentConfig(**values)

    async def test_rejection_improves_auc(self, tmp_path):
        """Test rejecting the top 10% LoVME uncertainty raises macro AUC by >= 0.005 on average over 5 seeds."""
        gains = []
        for seed in range(5):
            runner = ExperimentRunner(self.noised(tmp_path, seed))
            await runner.run()
            pooled = runner.summaries["lovme"].pooled
            gains.append(pooled.auc_rejected["0.1"] - pooled.auc)
        assert np.mean(gains) >= 0.005

    async def test_variance_anticorrelates_with_ensemble_probability(self, tmp_path):
        """Test Var[L] against mean correct-class probability below 0.99 gives r < 0 with p < 0.01."""
        config = self.noised(
            tmp_path, 0, estimators=("lovme", "ground_truth"), ensemble_size=5, correlation_cutoff=0.99
        )
        runner = ExperimentRunner(config)
        await runner.run()
        correlation = runner.summaries["lovme"].correlation
        assert correlation.pearson_r_below_cutoff < 0
        assert correlation.p_value_below_cutoff < 0.01

"""
Experiment orchestration: data -> train -> estimators -> eval, plus the
exact-enumeration cross-check.

Every output lands in an `ArtifactStore`; the manifest records the full
config, every seed, the stage reached and the SHA-256 of every output.
Outputs carry no timestamps, so rerunning a manifest's config reproduces
them byte for byte, whatever the worker count.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .artifacts import ArtifactStore
from .baselines import GroundTruthReport, ground_truth_ensemble_async, importance_weighted_estimate, mc_dropout_async
from .config import ESTIMATORS, ChainConfig, ExperimentConfig, GibbsParams
from .data import Dataset, load_csv, load_idx, perturb, save_csv, synth_blobs
from .errors import ConfigError, EvaluationError, LovmeError, StageError
from .evaluation import (
    CURVE_HEADER,
    SCATTER_HEADER,
    EstimatorSummary,
    ScoredSample,
    band_roc,
    evaluate_estimator,
    multiclass_to_binary,
    normalize_uncertainty,
    roc_auc,
    scatter_rows,
    uncertainty_correlation,
)
from .gibbs import enumerate_ensemble, variance_via_logZ
from .losses import LossOracle
from .nn import Network, count_maskable_units, forward_full_batch, predict_full, softmax
from .sampler import TRACE_HEADER, ChainResult, UncertaintyReport, default_beta, estimate, run_chain, run_chains_async
from .trainer import Trainer
from .utils import derive_int_seed
from .weights import encode_weights, load_weights_async

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "lovme-manifest/1"
MANIFEST_NAME = "manifest.json"
CLEANUP_POLICY = "keep-partial"
SEED_DERIVATION = "SeedSequence(entropy=master_seed, spawn_key=(index,))"

WEIGHTS_NAME = "weights.tnlw"
WEIGHTS_CONFIG_NAME = "weights_config.json"

# Settings that change the trained network; saved weights are reused only when these match.
TRAINING_FIELDS = (
    "dataset_source",
    "train_images",
    "train_labels",
    "train_csv",
    "image_shape",
    "class_count",
    "train_size",
    "test_size",
    "synth_dim",
    "synth_noise_sigma",
    "synth_label_noise_rate",
    "data_seed",
    "hidden_widths",
    "dropout_p",
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "train_seed",
    "mask_inputs",
)

# "train" always retrains; "model" reuses weights.tnlw from an earlier train in the same directory.
COMMAND_STAGES: Dict[str, List[str]] = {
    "train": ["data", "train"],
    "lovme": ["data", "model", "lovme"],
    "mc-dropout": ["data", "model", "mc_dropout"],
    "ground-truth": ["data", "model", "ground_truth"],
    "eval": ["data", "model", "eval"],
    "oracle-check": ["data", "oracle_check"],
}


def pipeline_stages(config: ExperimentConfig) -> List[str]:
    """Stages of the full `run` pipeline for this config."""
    stages = ["data", "train", *config.estimators, "eval"]
    if config.oracle_check:
        stages.append("oracle_check")
    return stages


class OracleCheckRow(BaseModel):
    beta: float
    eta: float
    exact_mean_loss: float
    exact_var_loss: float
    lovme_mean_loss: float
    lovme_var_loss: float
    rel_error_mean: float
    rel_error_var: float
    importance_mean_loss: float
    importance_var_loss: float
    var_via_logZ: float
    acceptance_rate: float
    chain_seed: int


def _relative(estimate_value: float, exact: float) -> float:
    return abs(estimate_value - exact) / abs(exact) if exact != 0.0 else abs(estimate_value)


class ExperimentRunner:
    """Runs the stages of one experiment against one output directory."""

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None):
        self.config = config
        self.store = store or ArtifactStore(config.output_dir)
        self.oracle = LossOracle(mode=config.loss_oracle, seed=config.oracle_seed)
        self.stage = "init"
        self.completed: List[str] = []
        self.train_data: Optional[Dataset] = None
        self.test_data: Optional[Dataset] = None
        self.perturbed_ids: List[int] = []
        self.net: Optional[Network] = None
        self.trainer: Optional[Trainer] = None
        self.beta: Optional[float] = None
        self.reports: Dict[str, List[UncertaintyReport]] = {}
        self.ground_truth: Optional[GroundTruthReport] = None
        self.summaries: Dict[str, EstimatorSummary] = {}
        self.oracle_rows: List[OracleCheckRow] = []
        self.ensemble_seeds: List[int] = []

    async def run(self, stages: Optional[Sequence[str]] = None) -> Dict[str, Any]:
        """Run `stages` in order; on failure the manifest marks the failed
        stage, partial artifacts stay on disk and StageError is raised."""
        stages = list(stages) if stages is not None else pipeline_stages(self.config)
        handlers = {
            "data": self.prepare_data,
            "train": self.train,
            "model": self.load_model,
            "lovme": self.run_lovme,
            "mc_dropout": self.run_mc_dropout,
            "ground_truth": self.run_ground_truth,
            "eval": self.evaluate,
            "oracle_check": self.oracle_check,
        }
        if "data" in stages:
            self.config.check_paths()
        for stage in stages:
            self.stage = stage
            logger.info("Stage '%s'", stage)
            try:
                await handlers[stage]()
            except (LovmeError, OSError) as e:
                logger.error("Stage '%s' failed: %s", stage, e)
                await self.write_manifest(failed_stage=stage)
                raise StageError(stage, e) from e
            self.completed.append(stage)
        self.stage = "complete"
        return await self.write_manifest()

    async def prepare_data(self) -> None:
        config = self.config
        if config.dataset_source == "synthetic":
            full = synth_blobs(
                config.train_size + config.test_size,
                config.class_count,
                config.synth_noise_sigma,
                config.synth_label_noise_rate,
                config.data_seed,
                dim=config.synth_dim,
            )
            train = full.subset(list(range(config.train_size)))
            test = replace(full.subset(list(range(config.train_size, len(full)))), split="test")
        elif config.dataset_source == "idx":
            train = load_idx(
                config.train_images, config.train_labels, config.train_size, config.class_count, split="train"
            )
            test = load_idx(
                config.test_images, config.test_labels, config.test_size, config.class_count, split="test"
            )
        else:
            train = load_csv(config.train_csv, config.class_count, config.image_shape, "train", config.train_size)
            test = load_csv(config.test_csv, config.class_count, config.image_shape, "test", config.test_size)

        if config.perturb_fraction > 0.0:
            test, ids = perturb(
                test,
                config.perturb_fraction,
                config.perturb_rotation_deg,
                config.perturb_noise_sigma,
                config.perturb_seed,
            )
            self.perturbed_ids = list(ids)
            logger.info("Perturbed %d of %d test samples", len(ids), len(test))
        self.train_data, self.test_data = train, test
        save_csv(test, self.store.path("test_set.csv"))
        self.store.adopt("test_set.csv")
        logger.info(
            "Data: %d train / %d test samples, %d features, %d classes",
            len(train),
            len(test),
            train.feature_dim,
            train.class_count,
        )

    def training_settings(self) -> Dict[str, Any]:
        dumped = self.config.model_dump(mode="json")
        if self.config.dataset_source != "synthetic":
            # train and test are separate files; only synthetic blobs share one draw
            dumped["test_size"] = None
        return {name: dumped[name] for name in TRAINING_FIELDS}

    async def train(self) -> None:
        self.trainer = Trainer(self.config.train_config())
        self.net = self.trainer.fit(self.train_data)
        await self.store.write_bytes_async(WEIGHTS_NAME, encode_weights(self.net))
        await self.store.write_json_async(WEIGHTS_CONFIG_NAME, self.training_settings())
        await self.store.write_csv_async(
            "train_log.csv", ["epoch", "train_loss", "train_accuracy"], self.trainer.log_rows()
        )
        self._set_beta()

    async def load_model(self) -> None:
        """Reuse the network an earlier `train` left in this directory, or
        train one when there is none. Weights trained under other settings
        raise ConfigError rather than being replaced."""
        if not self.store.path(WEIGHTS_NAME).is_file():
            logger.info("No %s in %s; training a network", WEIGHTS_NAME, self.store.root)
            await self.train()
            return
        saved = await self.store.read_json_async(WEIGHTS_CONFIG_NAME)
        if saved is None:
            raise ConfigError(f"{WEIGHTS_NAME} in {self.store.root} has no {WEIGHTS_CONFIG_NAME}; rerun `train`")
        current = self.training_settings()
        changed = sorted(name for name in TRAINING_FIELDS if saved.get(name) != current[name])
        if changed:
            raise ConfigError(
                f"{WEIGHTS_NAME} in {self.store.root} was trained with different {', '.join(changed)}; "
                "rerun `train` or pass the settings it was trained with"
            )
        self.net = await load_weights_async(self.store.path(WEIGHTS_NAME), mask_inputs=self.config.mask_inputs)
        for name in (WEIGHTS_NAME, WEIGHTS_CONFIG_NAME, "train_log.csv"):
            if self.store.path(name).is_file():
                self.store.adopt(name)
        logger.info("Loaded %s from %s", WEIGHTS_NAME, self.store.root)
        self._set_beta()

    def _set_beta(self) -> None:
        self.beta = self.config.beta
        if self.beta is None:
            self.beta = default_beta(self.net, self.test_data, self.oracle)
            logger.info("Default beta = 1 / mean test loss = %.6g", self.beta)

    async def _write_results(self, name: str, results: List[ChainResult]) -> None:
        if self.config.write_traces:
            for result in results:
                await self.store.write_csv_async(
                    f"traces/{name}/sample_{result.report.sample_id}.csv", TRACE_HEADER, result.trace.csv_rows()
                )
        self.reports[name] = [result.report for result in results]
        await self.store.write_json_async(
            f"reports/{name}.json", [report.model_dump(mode="json") for report in self.reports[name]]
        )

    async def run_lovme(self) -> None:
        results = await run_chains_async(
            self.net, self.test_data, self.config.chain_config(self.beta), self.oracle, self.config.workers
        )
        await self._write_results("lovme", results)

    async def run_mc_dropout(self) -> None:
        p = self.config.mc_p if self.config.mc_p is not None else self.config.dropout_p
        results = await mc_dropout_async(
            self.net, self.test_data, p, self.config.mc_samples, self.config.mc_seed, self.oracle, self.config.workers
        )
        await self._write_results("mc_dropout", results)

    async def run_ground_truth(self) -> None:
        config = self.config
        self.ground_truth = await ground_truth_ensemble_async(
            config.train_config(),
            self.train_data,
            self.test_data,
            config.ensemble_size,
            config.ensemble_seed,
            workers=config.workers,
        )
        self.ensemble_seeds = list(self.ground_truth.seeds)
        await self.store.write_json_async("reports/ground_truth.json", self.ground_truth.model_dump(mode="json"))

    async def _load_reports(self) -> None:
        """Pick up reports that an earlier invocation wrote to the same directory."""
        for name in self.config.estimators:
            if name in self.reports or (name == "ground_truth" and self.ground_truth is not None):
                continue
            payload = await self.store.read_json_async(f"reports/{name}.json")
            if payload is None:
                logger.warning("No reports/%s.json in %s; skipping %s", name, self.store.root, name)
                continue
            self.store.adopt(f"reports/{name}.json")
            if name == "ground_truth":
                self.ground_truth = GroundTruthReport.model_validate(payload)
                self.ensemble_seeds = list(self.ground_truth.seeds)
            else:
                self.reports[name] = [UncertaintyReport.model_validate(item) for item in payload]

    def _raw_uncertainty(self, name: str) -> np.ndarray:
        if name == "ground_truth":
            return self.ground_truth.uncertainties()
        return np.array([report.var_loss for report in self.reports[name]])

    async def evaluate(self) -> None:
        await self._load_reports()
        config = self.config
        test = self.test_data
        probabilities = softmax(forward_full_batch(self.net, test.features))
        available = [n for n in ESTIMATORS if n in self.reports or (n == "ground_truth" and self.ground_truth)]
        summary: Dict[str, Any] = {
            "beta": self.beta,
            "eta": config.eta,
            "class_count": test.class_count,
            "n_test": len(test),
            "perturbed_ids": self.perturbed_ids,
            "estimators": {},
        }
        for name in available:
            raw = self._raw_uncertainty(name)
            if raw.size != len(test):
                raise EvaluationError(f"{name} has {raw.size} reports for {len(test)} samples")
            u = normalize_uncertainty(raw, config.uncertainty_scale)
            scored = [
                ScoredSample(sample_id=i, probabilities=tuple(probabilities[i]), label=int(test.labels[i]), u=float(u[i]))
                for i in range(len(test))
            ]
            result = evaluate_estimator(name, scored, test.class_count, config.rejection_quantiles, self.perturbed_ids)
            if self.ground_truth is not None and name != "ground_truth":
                pairs = list(zip(raw.tolist(), self.ground_truth.mean_probabilities().tolist()))
                result = result.model_copy(
                    update={"correlation": uncertainty_correlation(pairs, config.correlation_cutoff)}
                )
                if name == "lovme" or "lovme" not in available:
                    await self.store.write_csv_async("correlation.csv", SCATTER_HEADER, scatter_rows(pairs))
            await self._write_curves(name, scored, test.class_count)
            self.summaries[name] = result
            summary["estimators"][name] = result.model_dump(mode="json")
        await self.store.write_json_async("summary.json", summary)

    async def _write_curves(self, name: str, scored: List[ScoredSample], class_count: int) -> None:
        for k in range(class_count):
            binary = multiclass_to_binary(scored, k)
            positives = sum(r.label for r in binary)
            if positives in (0, len(binary)):
                continue
            optimistic, pessimistic = band_roc(binary)
            for suffix, curve in (("", roc_auc(binary)), ("_optimistic", optimistic), ("_pessimistic", pessimistic)):
                await self.store.write_csv_async(f"curves/{name}_class{k}{suffix}.csv", CURVE_HEADER, curve.csv_rows())

    async def oracle_check(self) -> None:
        """Exact enumeration on a tiny network against LoVME and importance sampling."""
        config = self.config
        train_config = config.train_config().model_copy(update={"hidden_widths": config.oracle_hidden_widths})
        net = Trainer(train_config).fit(self.train_data)
        sample = self.test_data.sample(config.oracle_sample_index)
        sample_id = config.oracle_sample_index
        exact_results = []
        self.oracle_rows = []
        k = 0
        for beta in config.oracle_betas:
            for eta in config.oracle_etas:
                params = GibbsParams(beta=beta, eta=eta)
                exact = enumerate_ensemble(net, sample, params, self.oracle, sample_id)
                seed = derive_int_seed(config.chain_seed, k)
                chain = ChainConfig(
                    params=params,
                    transitions=config.burn_in + config.oracle_states * config.thin,
                    burn_in=config.burn_in,
                    thin=config.thin,
                    proposal_kernel=config.proposal_kernel,
                    seed=seed,
                )
                trace = run_chain(net, sample, chain, self.oracle, sample_id)
                lovme = estimate(trace, predict_full(net, sample.features), sample_id)
                weighted = importance_weighted_estimate(
                    net, sample, params, config.oracle_states, seed, self.oracle, sample_id
                )
                self.oracle_rows.append(
                    OracleCheckRow(
                        beta=beta,
                        eta=eta,
                        exact_mean_loss=exact.mean_loss,
                        exact_var_loss=exact.var_loss,
                        lovme_mean_loss=lovme.mean_loss,
                        lovme_var_loss=lovme.var_loss,
                        rel_error_mean=_relative(lovme.mean_loss, exact.mean_loss),
                        rel_error_var=_relative(lovme.var_loss, exact.var_loss),
                        importance_mean_loss=weighted.mean_loss,
                        importance_var_loss=weighted.var_loss,
                        var_via_logZ=variance_via_logZ(net, sample, params, loss_oracle=self.oracle, sample_id=sample_id),
                        acceptance_rate=trace.acceptance_rate,
                        chain_seed=seed,
                    )
                )
                exact_results.append(exact.model_dump(mode="json"))
                k += 1
        worst = max(row.rel_error_var for row in self.oracle_rows)
        logger.info("Oracle check on N0=%d: worst relative Var[L] error %.4f", count_maskable_units(net), worst)
        await self.store.write_json_async(
            "oracle_check.json",
            {
                "n0": count_maskable_units(net),
                "sample_id": sample_id,
                "oracle": exact_results,
                "comparison": [row.model_dump(mode="json") for row in self.oracle_rows],
            },
        )

    def seeds(self) -> Dict[str, Any]:
        config = self.config
        seeds: Dict[str, Any] = {
            "data_seed": config.data_seed,
            "perturb_seed": config.perturb_seed,
            "train_seed": config.train_seed,
            "chain_seed": config.chain_seed,
            "mc_seed": config.mc_seed,
            "ensemble_seed": config.ensemble_seed,
            "oracle_seed": config.oracle_seed,
            "derivation": SEED_DERIVATION,
        }
        if self.ensemble_seeds:
            seeds["ensemble_member_seeds"] = self.ensemble_seeds
        if self.oracle_rows:
            seeds["oracle_check_chain_seeds"] = [row.chain_seed for row in self.oracle_rows]
        return seeds

    async def write_manifest(self, failed_stage: Optional[str] = None) -> Dict[str, Any]:
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "config": self.config.model_dump(mode="json"),
            "seeds": self.seeds(),
            "beta": self.beta,
            "stages": self.completed,
            "stage": failed_stage or self.stage,
            "status": "failed" if failed_stage else "complete",
            "cleanup_policy": CLEANUP_POLICY,
            "outputs": self.store.sorted_digests(),
        }
        await self.store.write_json_async(MANIFEST_NAME, manifest)
        return manifest


async def run_experiment(config: ExperimentConfig, stages: Optional[Sequence[str]] = None) -> Path:
    """Run the pipeline (or the given stages) and return the artifact directory."""
    runner = ExperimentRunner(config)
    await runner.run(stages)
    return runner.store.root

"""Which label a thinned network's loss is measured against."""

import numpy as np
from pydantic import BaseModel, ConfigDict

from .config import OracleMode
from .data import Dataset
from .nn import Network, Sample, ThinnedEvaluator, forward_full_batch, predict_full
from .utils import derive_rng


class LossOracle(BaseModel):
    """Target-label policy, fixed for the whole chain.

    - true_label: the sample's own label
    - predicted_label: the full network's argmax prediction
    - random_label: a label drawn once per sample from (seed, sample id)
    """

    model_config = ConfigDict(frozen=True)

    mode: OracleMode = "predicted_label"
    seed: int = 0

    def target_label(self, net: Network, sample: Sample, sample_id: int = 0) -> int:
        if self.mode == "true_label":
            return sample.label
        if self.mode == "predicted_label":
            return int(np.argmax(predict_full(net, sample.features)))
        return int(derive_rng(self.seed, sample_id).integers(net.class_count))

    def target_labels(self, net: Network, dataset: Dataset) -> np.ndarray:
        if self.mode == "true_label":
            return dataset.labels.copy()
        if self.mode == "predicted_label":
            return forward_full_batch(net, dataset.features).argmax(axis=1)
        return np.array(
            [derive_rng(self.seed, i).integers(net.class_count) for i in range(len(dataset))],
            dtype=np.int64,
        )

    def evaluator(self, net: Network, sample: Sample, sample_id: int = 0) -> ThinnedEvaluator:
        return ThinnedEvaluator(net, sample.features, self.target_label(net, sample, sample_id))

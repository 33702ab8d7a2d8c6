"""Multi-layer perceptron classifier."""

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from hetpar.models.base import ParameterSpec, Record, TrainableModel
from hetpar.services.autograd import Tensor
from hetpar.services.ops import add_bias, dropout, label_smoothed_cross_entropy, matmul, relu
from hetpar.services.rng import SeededRng


class MlpClassifier(TrainableModel):
    """Feature vector → ReLU hidden layers → class logits."""

    RECORD_FIELDS = ("features", "label")

    def layer_sizes(self):
        """Input, hidden and output widths."""
        return [self.spec.d_in] + list(self.spec.hidden) + [self.spec.n_classes]

    def parameter_specs(self) -> Dict[str, ParameterSpec]:
        sizes = self.layer_sizes()
        specs = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            specs[f"layers.{i}.weight"] = ParameterSpec((fan_in, fan_out), fan_in=fan_in)
            specs[f"layers.{i}.bias"] = ParameterSpec((fan_out,))
        return specs

    def _forward(
        self,
        params: Mapping[str, Tensor],
        records: Sequence[Record],
        weight_policy: str,
        dropout_rng: Optional[SeededRng],
    ) -> Tuple[Tensor, float]:
        features = np.stack([np.asarray(r["features"], dtype=self.dtype).reshape(-1) for r in records])
        labels = np.array([int(np.asarray(r["label"]).reshape(-1)[0]) for r in records], dtype=np.int64)

        x = Tensor(features)
        n_layers = len(self.layer_sizes()) - 1
        for i in range(n_layers):
            x = add_bias(matmul(x, params[f"layers.{i}.weight"]), params[f"layers.{i}.bias"])
            if i < n_layers - 1:
                x = dropout(relu(x), self.spec.dropout, dropout_rng)

        loss, count = label_smoothed_cross_entropy(x, labels, self.spec.label_smoothing)
        # one token per feature vector, so both policies count instances
        return loss, float(count)

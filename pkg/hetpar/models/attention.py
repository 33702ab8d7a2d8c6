"""Single-layer self-attention sequence classifier."""

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from hetpar.models.base import ParameterSpec, Record, TrainableModel
from hetpar.services.attention import head_parameter_names, multi_head_attention, sinusoidal_positions
from hetpar.services.autograd import Tensor
from hetpar.services.ops import (
    add,
    add_bias,
    concat_rows,
    dropout,
    embedding,
    label_smoothed_cross_entropy,
    matmul,
    relu,
)
from hetpar.services.rng import SeededRng


def attention_parameter_specs(d_model: int, heads: int, prefix: str = "attn") -> Dict[str, ParameterSpec]:
    """Per-head Q/K/V projections plus the output projection."""
    d_head = d_model // heads
    specs = {}
    for name in head_parameter_names(prefix, heads):
        if name.endswith(".wo"):
            specs[name] = ParameterSpec((d_model, d_model), fan_in=d_model)
        else:
            specs[name] = ParameterSpec((d_model, d_head), fan_in=d_model)
    return specs


class AttentionClassifier(TrainableModel):
    """Token embeddings + positions → multi-head self-attention → mean pool → classifier."""

    RECORD_FIELDS = ("tokens", "label")

    def __init__(self, spec):
        super().__init__(spec)
        self.positions = sinusoidal_positions(spec.max_seq_len, spec.d_model, spec.dtype).data

    def parameter_specs(self) -> Dict[str, ParameterSpec]:
        s = self.spec
        specs = {"embed.tokens": ParameterSpec((s.vocab_size, s.d_model), fan_in=s.d_model)}
        specs.update(attention_parameter_specs(s.d_model, s.n_heads))
        specs["ffn.w1"] = ParameterSpec((s.d_model, s.d_ff), fan_in=s.d_model)
        specs["ffn.b1"] = ParameterSpec((s.d_ff,))
        specs["out.weight"] = ParameterSpec((s.d_ff, s.n_classes), fan_in=s.d_ff)
        specs["out.bias"] = ParameterSpec((s.n_classes,))
        return specs

    def _encode(self, params: Mapping[str, Tensor], tokens: np.ndarray, rng: Optional[SeededRng]) -> Tensor:
        self.check_length(tokens)
        h = add(embedding(params["embed.tokens"], tokens), Tensor(self.positions[: len(tokens)]))
        h = dropout(h, self.spec.dropout, rng)
        return add(h, multi_head_attention(h, h, h, params, self.spec.n_heads))

    def _forward(
        self,
        params: Mapping[str, Tensor],
        records: Sequence[Record],
        weight_policy: str,
        dropout_rng: Optional[SeededRng],
    ) -> Tuple[Tensor, float]:
        pooled = []
        labels = []
        token_count = 0
        for record in records:
            tokens = np.asarray(record["tokens"], dtype=np.int64).reshape(-1)
            z = self._encode(params, tokens, dropout_rng)
            mean_row = np.full((1, len(tokens)), 1.0 / len(tokens), dtype=self.dtype)
            pooled.append(matmul(Tensor(mean_row), z))
            labels.append(int(np.asarray(record["label"]).reshape(-1)[0]))
            token_count += len(tokens)

        hidden = relu(add_bias(matmul(concat_rows(pooled), params["ffn.w1"]), params["ffn.b1"]))
        hidden = dropout(hidden, self.spec.dropout, dropout_rng)
        logits = add_bias(matmul(hidden, params["out.weight"]), params["out.bias"])
        loss, count = label_smoothed_cross_entropy(logits, labels, self.spec.label_smoothing)
        weight = token_count if weight_policy == "tokens" else count
        return loss, float(weight)

"""Masked-token model with segment embeddings and a next-sentence head."""

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from hetpar.models.attention import attention_parameter_specs
from hetpar.models.base import ParameterSpec, Record, TrainableModel
from hetpar.services.attention import multi_head_attention, sinusoidal_positions
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

CLS_POSITION = 0


class MaskedTokenModel(TrainableModel):
    """Encoder layer over [CLS] A [SEP] B [SEP] with masked-token and next-sentence heads.

    The masked-token loss is summed over masked positions only; the
    next-sentence head reads the [CLS] hidden state.
    """

    RECORD_FIELDS = ("tokens", "segments", "mask_positions", "mask_labels", "nsp_label")

    def __init__(self, spec):
        super().__init__(spec)
        self.positions = sinusoidal_positions(spec.max_seq_len, spec.d_model, spec.dtype).data

    def parameter_specs(self) -> Dict[str, ParameterSpec]:
        s = self.spec
        specs = {
            "embed.tokens": ParameterSpec((s.vocab_size, s.d_model), fan_in=s.d_model),
            # rows are Seg_0 and Seg_1
            "embed.segments": ParameterSpec((2, s.d_model), fan_in=s.d_model),
        }
        specs.update(attention_parameter_specs(s.d_model, s.n_heads))
        specs["ffn.w1"] = ParameterSpec((s.d_model, s.d_ff), fan_in=s.d_model)
        specs["ffn.b1"] = ParameterSpec((s.d_ff,))
        specs["ffn.w2"] = ParameterSpec((s.d_ff, s.d_model), fan_in=s.d_ff)
        specs["ffn.b2"] = ParameterSpec((s.d_model,))
        specs["mlm.weight"] = ParameterSpec((s.d_model, s.vocab_size), fan_in=s.d_model)
        specs["mlm.bias"] = ParameterSpec((s.vocab_size,))
        if s.nsp_head:
            specs["nsp.weight"] = ParameterSpec((s.d_model, 2), fan_in=s.d_model)
            specs["nsp.bias"] = ParameterSpec((2,))
        return specs

    def _encode(self, params, tokens: np.ndarray, segments: np.ndarray, rng: Optional[SeededRng]) -> Tensor:
        self.check_length(tokens)
        h = add(embedding(params["embed.tokens"], tokens), embedding(params["embed.segments"], segments))
        h = add(h, Tensor(self.positions[: len(tokens)]))
        h = dropout(h, self.spec.dropout, rng)
        z = add(h, multi_head_attention(h, h, h, params, self.spec.n_heads))
        f = dropout(relu(add_bias(matmul(z, params["ffn.w1"]), params["ffn.b1"])), self.spec.dropout, rng)
        return add(z, add_bias(matmul(f, params["ffn.w2"]), params["ffn.b2"]))

    def _forward(
        self,
        params: Mapping[str, Tensor],
        records: Sequence[Record],
        weight_policy: str,
        dropout_rng: Optional[SeededRng],
    ) -> Tuple[Tensor, float]:
        masked_rows = []
        masked_labels = []
        cls_rows = []
        nsp_labels = []
        for record in records:
            tokens = np.asarray(record["tokens"], dtype=np.int64).reshape(-1)
            segments = np.asarray(record["segments"], dtype=np.int64).reshape(-1)
            positions = np.asarray(record["mask_positions"], dtype=np.int64).reshape(-1)
            z = self._encode(params, tokens, segments, dropout_rng)
            if positions.size:
                masked_rows.append(embedding(z, positions))
                masked_labels.extend(np.asarray(record["mask_labels"], dtype=np.int64).reshape(-1).tolist())
            if self.spec.nsp_head:
                cls_rows.append(embedding(z, [CLS_POSITION]))
                nsp_labels.append(int(np.asarray(record["nsp_label"]).reshape(-1)[0]))

        loss = self.zero_loss()
        if masked_rows:
            logits = add_bias(matmul(concat_rows(masked_rows), params["mlm.weight"]), params["mlm.bias"])
            mlm_loss, _ = label_smoothed_cross_entropy(logits, masked_labels, self.spec.label_smoothing)
            loss = mlm_loss
        if cls_rows:
            nsp_logits = add_bias(matmul(concat_rows(cls_rows), params["nsp.weight"]), params["nsp.bias"])
            nsp_loss, _ = label_smoothed_cross_entropy(nsp_logits, nsp_labels, 0.0)
            loss = nsp_loss if not masked_rows else add(loss, nsp_loss)

        weight = len(masked_labels) if weight_policy == "tokens" else len(records)
        return loss, float(weight)

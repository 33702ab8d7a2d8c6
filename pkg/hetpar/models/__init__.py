"""Model registry."""

from typing import Dict, Type

from hetpar.models.attention import AttentionClassifier
from hetpar.models.base import ForwardResult, ParameterSpec, TrainableModel
from hetpar.models.masked_token import MaskedTokenModel
from hetpar.models.mlp import MlpClassifier
from hetpar.schemas.model import ModelSpec

MODELS: Dict[str, Type[TrainableModel]] = {
    "mlp": MlpClassifier,
    "attention_classifier": AttentionClassifier,
    "masked_token_model": MaskedTokenModel,
}


def build_model(spec: ModelSpec) -> TrainableModel:
    """Instantiate the model class registered for ``spec.arch``."""
    model_class = MODELS.get(spec.arch)
    if not model_class:
        raise ValueError(f"Unknown architecture: {spec.arch}")
    return model_class(spec)


__all__ = [
    "AttentionClassifier",
    "ForwardResult",
    "MaskedTokenModel",
    "MlpClassifier",
    "MODELS",
    "ParameterSpec",
    "TrainableModel",
    "build_model",
]

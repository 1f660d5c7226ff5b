from .blocks import (
    MLP,
    AllMaskedError,
    BatchNorm,
    ClippedAttention,
    Engnn,
    EngnnLayer,
    MlpFactory,
    MultiHeadAttention,
    TypedEdgeGnn,
    TypedEdgeLayer,
    apply_typed,
    linear,
    masked_log_softmax,
    masked_softmax,
)

__all__ = [
    "MLP",
    "AllMaskedError",
    "BatchNorm",
    "ClippedAttention",
    "Engnn",
    "EngnnLayer",
    "MlpFactory",
    "MultiHeadAttention",
    "TypedEdgeGnn",
    "TypedEdgeLayer",
    "apply_typed",
    "linear",
    "masked_log_softmax",
    "masked_softmax",
]

"""Relevance propagation with absolute-magnitude normalization, and its evaluation."""

from .attribution import (
    AttributionMap,
    MethodConfig,
    attribute,
    attribute_batch,
    gradient_baselines,
    init_relevance,
    parse_method,
    rollout,
    tibav,
)
from .gae import evaluate_gae, gae_score, run_masking
from .layers import LayerShapeError, LayerSpec
from .model import Model, Tape, backward, forward, forward_batch, grad, mlp, small_cnn, tiny_vit, toy_network
from .rules import abslrp_layer, lrp_alphabeta_layer, lrp_epsilon_layer, rap_layer
from .stats import wilcoxon_signed_rank

__version__ = "0.1.0"

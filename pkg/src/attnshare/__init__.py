"""Cross-layer attention-weight sharing lab for decoder-only transformers."""

from .analysis import (DeviationResult, SimilarityReport, deviation_sweep,
                       head_matched_js, js_divergence, pairwise_layer_js,
                       run_analysis, submodule_cosine)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (BYTE_VOCAB, LisaLayerConfig, ModelConfig, SharingConfig,
                     MODEL_PRESETS)
from .costs import (COST_PRESETS, CostShape, LayerKind, decode_flops_per_token,
                    flops_report, memory_report)
from .engine import KVCache, decode_step, generate, prefill
from .model import (AttentionTrace, ForwardResult, Model, ModelWeights,
                    init_weights, model_forward)
from .sharing import LisaParams, init_lisa_params
from .tensor import Tape, Tensor, grad_check
from .training import (Adam, Corpus, TrainConfig, eval_perplexity, huber,
                       kd_loss, lm_loss, pretrain, uptrain)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AttentionTrace", "BYTE_VOCAB", "COST_PRESETS", "Corpus",
    "CostShape", "DeviationResult", "ForwardResult", "KVCache", "LayerKind",
    "LisaLayerConfig", "LisaParams", "MODEL_PRESETS", "Model", "ModelConfig",
    "ModelWeights", "SharingConfig", "SimilarityReport", "Tape", "Tensor",
    "TrainConfig", "decode_flops_per_token", "decode_step", "deviation_sweep",
    "eval_perplexity", "flops_report", "generate", "grad_check",
    "head_matched_js", "huber", "init_lisa_params", "init_weights",
    "js_divergence", "kd_loss", "lm_loss", "load_checkpoint",
    "memory_report", "model_forward", "pairwise_layer_js", "prefill",
    "pretrain", "run_analysis", "save_checkpoint", "submodule_cosine",
    "uptrain",
]

"""Dual-tower retrieval engine with parameter-efficient tuning components
and built-in gradient verification."""

from .adapters import AdapterBlock, AdapterPlacement, LayerNormParams, adapter_forward, apply_placement, l_adapter
from .attention import (
    AttentionWeights,
    AttnMask,
    LoraPair,
    PrefixBank,
    attend,
    lora_expansion_terms,
    lora_project,
    merge_lora,
    prefix_lambda,
    sprefix_attend,
)
from .data import Corpus, SyntheticSpec, generate_dataset, load_jsonl, save_jsonl
from .encoder import (
    DualTowerState,
    ImageEncoderConfig,
    PETLConfig,
    TextEncoderConfig,
    TowerState,
    attach_petl_model,
    block_forward,
    build_model,
    encode_image,
    encode_text,
    param_manifest,
    partition_params,
)
from .losses import LossConfig, bidirectional_sdm, itc_loss, match_probabilities, sdm_loss, true_distribution
from .metrics import RetrievalResult, evaluate_retrieval, mean_ap, rank_k
from .tensor import ParamTensor, check_gradient, layer_norm, matmul, softmax_rows
from .training import AdamState, ModelConfig, TrainConfig, adam_step, run_transfer_experiment

__version__ = "0.1.0"

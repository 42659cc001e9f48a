"""Adam optimizer, the frozen-backbone tuning loop, and the synthetic
transfer experiment (pretrain on the base domain, freeze, attach tuning
modules, tune on the shifted domain, evaluate text-to-image retrieval).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Corpus, SyntheticSpec, generate_dataset
from .encoder import (
    DualTowerState,
    ImageEncoderConfig,
    PETLConfig,
    TextEncoderConfig,
    attach_petl_model,
    build_model,
    encode_image_bwd,
    encode_image_fwd,
    encode_text_batch_fwd,
    encode_text_bwd,
    encode_text_fwd,
    frame_tokens,
    model_params,
    partition_params,
    set_backbone_trainable,
    zero_grads,
)
from .losses import LossConfig, loss_with_grad
from .metrics import RetrievalResult, evaluate_retrieval
from .tensor import ParamTensor


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    petl: PETLConfig = field(default_factory=PETLConfig)


@dataclass
class ModelConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    d_out: int = 64


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: list[ParamTensor], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update over the trainable parameters.

    Frozen tensors are never touched; their gradients are identically zero
    by the accumulation contract anyway.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        if not p.trainable:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad ** 2
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# batching and epochs


def _batch_labels(identities: np.ndarray) -> np.ndarray:
    return (identities[:, None] == identities[None, :]).astype(np.float64)


def _length_groups(batch, text_cfg) -> list[list[int]]:
    """Indices grouped by framed text length so each group stacks cleanly."""
    by_len: dict[int, list[int]] = {}
    for i, rec in enumerate(batch):
        by_len.setdefault(len(frame_tokens(rec.tokens, text_cfg)), []).append(i)
    return list(by_len.values())


def train_epochs(
    model: DualTowerState,
    corpus: Corpus,
    cfg: TrainConfig,
    petl: PETLConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Run SGD epochs over the paired corpus; returns the per-epoch mean loss."""
    params = [p for _, p in model_params(model)]
    opt = AdamState()
    records = corpus.records
    curve = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(records))
        losses = []
        for start in range(0, len(order), cfg.batch):
            batch = [records[i] for i in order[start : start + cfg.batch]]
            if len(batch) < 2:
                continue
            zero_grads(model)
            f_v, cache_v = encode_image_fwd(
                np.stack([rec.patches for rec in batch]), model.image, petl
            )
            f_t = np.empty((len(batch), model.d_out))
            groups = _length_groups(batch, model.text_cfg)
            caches_t = []
            for idx in groups:
                f_t[idx], ct = encode_text_batch_fwd(
                    [batch[i].tokens for i in idx],
                    model.text,
                    model.text_cfg,
                    petl,
                    training=True,
                    rng=rng,
                )
                caches_t.append(ct)
            y = _batch_labels(np.array([rec.identity for rec in batch]))
            loss, d_fv, d_ft = loss_with_grad(f_v, f_t, y, cfg.loss)
            encode_image_bwd(d_fv, cache_v, model.image)
            for idx, ct in zip(groups, caches_t):
                encode_text_bwd(d_ft[idx], ct, model.text)
            adam_step(params, opt, cfg)
            losses.append(loss)
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return curve


# ---------------------------------------------------------------------------
# evaluation


def encode_corpus(model: DualTowerState, corpus: Corpus, petl: PETLConfig):
    """Deterministic gallery/query embeddings for text-to-image retrieval.

    The gallery holds one embedding per distinct image (patch grids repeat
    across texts of the same image); queries are all texts.
    """
    gallery_patches, gallery_ids = [], []
    seen: set[tuple[int, bytes]] = set()
    for rec in corpus.records:
        key = (rec.identity, rec.patches.tobytes())
        if key not in seen:
            seen.add(key)
            gallery_patches.append(rec.patches)
            gallery_ids.append(rec.identity)
    f_v, _ = encode_image_fwd(np.stack(gallery_patches), model.image, petl)

    query_ids = np.array([rec.identity for rec in corpus.records])
    f_t = np.empty((len(corpus.records), model.d_out))
    groups = _length_groups(corpus.records, model.text_cfg)
    for idx in groups:
        f_t[idx], _ = encode_text_batch_fwd(
            [corpus.records[i].tokens for i in idx],
            model.text,
            model.text_cfg,
            petl,
            training=False,
        )
    return f_t, query_ids, f_v, np.array(gallery_ids)


def evaluate_model(model: DualTowerState, corpus: Corpus, petl: PETLConfig) -> RetrievalResult:
    f_t, q_ids, f_v, g_ids = encode_corpus(model, corpus, petl)
    return evaluate_retrieval(f_t @ f_v.T, q_ids, g_ids)


# ---------------------------------------------------------------------------
# transfer experiment


@dataclass
class TransferOutcome:
    zero_shot: RetrievalResult
    tuned: RetrievalResult
    trainable_params: int
    total_params: int
    pretrain_curve: list[float]
    tune_curve: list[float]
    wall_time_s: float


def pretrain_backbone(
    model_cfg: ModelConfig, pretrain_spec: SyntheticSpec, cfg: TrainConfig
) -> tuple[DualTowerState, list[float]]:
    """Full-tune a fresh backbone (no tuning modules) on the base domain."""
    rng = np.random.default_rng(cfg.seed)
    model = build_model(model_cfg.image, model_cfg.text, model_cfg.d_out, rng)
    corpus = generate_dataset(pretrain_spec, split="pretrain")
    petl_off = PETLConfig(sprefix=False, lora=False, l_adapter=False)
    set_backbone_trainable(model, True)
    curve = train_epochs(model, corpus, cfg, petl_off, rng)
    set_backbone_trainable(model, False)
    return model, curve


def tune_petl(
    model: DualTowerState,
    downstream_spec: SyntheticSpec,
    cfg: TrainConfig,
) -> list[float]:
    """Attach tuning modules per the config and tune them on the shifted domain."""
    rng = np.random.default_rng(cfg.seed + 1)
    attach_petl_model(model, cfg.petl, rng)
    corpus = generate_dataset(downstream_spec, split="tune")
    return train_epochs(model, corpus, cfg, cfg.petl, rng)


def run_transfer_experiment(
    pretrain_spec: SyntheticSpec,
    downstream_spec: SyntheticSpec,
    test_spec: SyntheticSpec,
    model_cfg: ModelConfig,
    pretrain_cfg: TrainConfig,
    tune_cfg: TrainConfig,
) -> TransferOutcome:
    started = time.perf_counter()
    model, pretrain_curve = pretrain_backbone(model_cfg, pretrain_spec, pretrain_cfg)
    test_corpus = generate_dataset(test_spec, split="test")

    petl_off = PETLConfig(sprefix=False, lora=False, l_adapter=False)
    zero_shot = evaluate_model(model, test_corpus, petl_off)

    tune_curve = tune_petl(model, downstream_spec, tune_cfg)
    tuned = evaluate_model(model, test_corpus, tune_cfg.petl)

    _, _, counts = partition_params(model, tune_cfg.petl)
    return TransferOutcome(
        zero_shot=zero_shot,
        tuned=tuned,
        trainable_params=counts["trainable"],
        total_params=counts["total"],
        pretrain_curve=pretrain_curve,
        tune_curve=tune_curve,
        wall_time_s=time.perf_counter() - started,
    )


def shifted_spec(spec: SyntheticSpec, **overrides) -> SyntheticSpec:
    return replace(spec, **overrides)

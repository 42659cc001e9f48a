"""Two-tower encoder: patch/CLS image tower and BOS/EOS causal text tower
built from pre-LN residual blocks with tuning hooks at both layernorms and
inside the attention sublayer.

The backbone is frozen after pretraining; only the attached tuning tensors
(prefix banks, low-rank pairs, adapters, and optionally layernorm gain/bias)
receive gradients afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import (
    AdapterBlock,
    AdapterPlacement,
    LayerNormParams,
    placement_bwd,
    placement_fwd,
)
from .attention import (
    AttentionWeights,
    AttnMask,
    LoraPair,
    PrefixBank,
    sprefix_attend_bwd,
    sprefix_attend_fwd,
)
from .data import BOS_ID, EOS_ID, MASK_ID
from .errors import ConfigurationError, ShapeError
from .tensor import (
    ParamTensor,
    activation,
    activation_backward,
    flat_weight_grad,
    l2_normalize,
    l2_normalize_backward,
    lead_sum,
)

LN_EPS = 1e-5


@dataclass
class ImageEncoderConfig:
    image_h: int = 16
    image_w: int = 16
    patch: int = 4
    patch_dim: int = 12
    d: int = 32
    layers: int = 2
    heads: int = 4

    def __post_init__(self):
        if (self.image_h * self.image_w) % (self.patch * self.patch) != 0:
            raise ConfigurationError("image area must be divisible by patch area")

    @property
    def num_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch * self.patch)

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1


@dataclass
class TextEncoderConfig:
    vocab: int = 64
    max_len: int = 16
    d: int = 32
    layers: int = 2
    heads: int = 4
    mask_rate: float = 0.15


@dataclass
class PETLConfig:
    sprefix: bool = True
    lora: bool = True
    l_adapter: bool = True
    prefix_len: int = 4
    lora_rank: int = 4
    adapter_bottleneck: int = 4
    s_p_init: float = 10.0
    placement: str = "parallel_ln"

    def __post_init__(self):
        AdapterPlacement(self.placement)  # validates the kind

    def disabled(self) -> "PETLConfig":
        return replace(self, sprefix=False, lora=False, l_adapter=False)


@dataclass
class BlockState:
    attn: AttentionWeights
    ln1: LayerNormParams
    ln2: LayerNormParams
    w_mlp_in: ParamTensor
    w_mlp_out: ParamTensor


@dataclass
class BlockPETL:
    prefix: PrefixBank | None = None
    lora_k: LoraPair | None = None
    lora_v: LoraPair | None = None
    adapter1: AdapterBlock | None = None
    adapter2: AdapterBlock | None = None


@dataclass
class TowerState:
    kind: str  # "image" | "text"
    d: int
    heads: int
    pos: ParamTensor
    proj: ParamTensor
    blocks: list[BlockState]
    petl: list[BlockPETL]
    patch_embed: ParamTensor | None = None
    cls: ParamTensor | None = None
    token_embed: ParamTensor | None = None


@dataclass
class DualTowerState:
    image: TowerState
    text: TowerState
    image_cfg: ImageEncoderConfig
    text_cfg: TextEncoderConfig
    d_out: int


# ---------------------------------------------------------------------------
# construction


def _pt(rng, shape, std, name, trainable=True):
    if std == 0.0:
        return ParamTensor(np.zeros(shape), trainable=trainable, name=name)
    return ParamTensor(rng.normal(0.0, std, size=shape), trainable=trainable, name=name)


def _build_blocks(rng, d: int, heads: int, layers: int, prefix: str) -> list[BlockState]:
    blocks = []
    w_std = d ** -0.5
    for i in range(layers):
        attn = AttentionWeights(
            w_q=_pt(rng, (d, d), w_std, f"{prefix}.blocks.{i}.attn.w_q"),
            w_k=_pt(rng, (d, d), w_std, f"{prefix}.blocks.{i}.attn.w_k"),
            w_v=_pt(rng, (d, d), w_std, f"{prefix}.blocks.{i}.attn.w_v"),
            w_o=_pt(rng, (d, d), w_std, f"{prefix}.blocks.{i}.attn.w_o"),
            heads=heads,
        )
        ln1 = LayerNormParams(
            gain=ParamTensor(np.ones(d), name=f"{prefix}.blocks.{i}.ln1.gain"),
            bias=ParamTensor(np.zeros(d), name=f"{prefix}.blocks.{i}.ln1.bias"),
            eps=LN_EPS,
        )
        ln2 = LayerNormParams(
            gain=ParamTensor(np.ones(d), name=f"{prefix}.blocks.{i}.ln2.gain"),
            bias=ParamTensor(np.zeros(d), name=f"{prefix}.blocks.{i}.ln2.bias"),
            eps=LN_EPS,
        )
        blocks.append(
            BlockState(
                attn=attn,
                ln1=ln1,
                ln2=ln2,
                w_mlp_in=_pt(rng, (d, 4 * d), w_std, f"{prefix}.blocks.{i}.mlp.w_in"),
                w_mlp_out=_pt(rng, (4 * d, d), (4 * d) ** -0.5, f"{prefix}.blocks.{i}.mlp.w_out"),
            )
        )
    return blocks


def build_image_tower(cfg: ImageEncoderConfig, d_out: int, rng) -> TowerState:
    d = cfg.d
    return TowerState(
        kind="image",
        d=d,
        heads=cfg.heads,
        patch_embed=_pt(rng, (cfg.patch_dim, d), cfg.patch_dim ** -0.5, "image.patch_embed"),
        cls=_pt(rng, (d,), 0.02, "image.cls"),
        pos=_pt(rng, (cfg.seq_len, d), 0.01, "image.pos"),
        proj=_pt(rng, (d, d_out), d ** -0.5, "image.proj"),
        blocks=_build_blocks(rng, d, cfg.heads, cfg.layers, "image"),
        petl=[BlockPETL() for _ in range(cfg.layers)],
    )


def build_text_tower(cfg: TextEncoderConfig, d_out: int, rng) -> TowerState:
    d = cfg.d
    return TowerState(
        kind="text",
        d=d,
        heads=cfg.heads,
        token_embed=_pt(rng, (cfg.vocab, d), 0.1, "text.token_embed"),
        pos=_pt(rng, (cfg.max_len, d), 0.01, "text.pos"),
        proj=_pt(rng, (d, d_out), d ** -0.5, "text.proj"),
        blocks=_build_blocks(rng, d, cfg.heads, cfg.layers, "text"),
        petl=[BlockPETL() for _ in range(cfg.layers)],
    )


def build_model(
    image_cfg: ImageEncoderConfig, text_cfg: TextEncoderConfig, d_out: int, rng
) -> DualTowerState:
    return DualTowerState(
        image=build_image_tower(image_cfg, d_out, rng),
        text=build_text_tower(text_cfg, d_out, rng),
        image_cfg=image_cfg,
        text_cfg=text_cfg,
        d_out=d_out,
    )


def attach_petl(tower: TowerState, petl: PETLConfig, rng) -> None:
    """Create freshly initialized tuning tensors on every block.

    Low-rank and adapter up-projections start at zero so the adapted model
    reproduces the frozen backbone exactly; prefix rows start small random.
    In ln_tuning placement the block layernorm gain/bias become trainable
    instead of carrying adapters.
    """
    d = tower.d
    name = tower.kind
    for i, slot in enumerate(tower.petl):
        if petl.sprefix and petl.prefix_len > 0:
            slot.prefix = PrefixBank(
                p_k=_pt(rng, (petl.prefix_len, d), 0.02, f"{name}.petl.{i}.prefix.p_k"),
                p_v=_pt(rng, (petl.prefix_len, d), 0.02, f"{name}.petl.{i}.prefix.p_v"),
                s_p=ParamTensor(np.array(petl.s_p_init), name=f"{name}.petl.{i}.prefix.s_p"),
            )
        if petl.lora:
            r = petl.lora_rank
            for proj in ("k", "v"):
                pair = LoraPair(
                    w_down=_pt(rng, (d, r), 0.02, f"{name}.petl.{i}.lora_{proj}.w_down"),
                    w_up=_pt(rng, (r, d), 0.0, f"{name}.petl.{i}.lora_{proj}.w_up"),
                    s=ParamTensor(np.array(1.0), name=f"{name}.petl.{i}.lora_{proj}.s"),
                )
                setattr(slot, f"lora_{proj}", pair)
        if petl.l_adapter:
            if petl.placement == "ln_tuning":
                block = tower.blocks[i]
                for ln in (block.ln1, block.ln2):
                    ln.gain.trainable = True
                    ln.bias.trainable = True
            else:
                b = petl.adapter_bottleneck
                for site in ("1", "2"):
                    adapter = AdapterBlock(
                        w_down=_pt(rng, (d, b), 0.02, f"{name}.petl.{i}.adapter{site}.w_down"),
                        w_up=_pt(rng, (b, d), 0.0, f"{name}.petl.{i}.adapter{site}.w_up"),
                        s=ParamTensor(np.array(1.0), name=f"{name}.petl.{i}.adapter{site}.s"),
                    )
                    setattr(slot, f"adapter{site}", adapter)


def attach_petl_model(model: DualTowerState, petl: PETLConfig, rng) -> None:
    attach_petl(model.image, petl, rng)
    attach_petl(model.text, petl, rng)


# ---------------------------------------------------------------------------
# parameter enumeration


def named_params(tower: TowerState) -> list[tuple[str, ParamTensor]]:
    out: list[tuple[str, ParamTensor]] = []

    def add(p: ParamTensor | None):
        if p is not None:
            out.append((p.name, p))

    add(tower.patch_embed)
    add(tower.cls)
    add(tower.token_embed)
    add(tower.pos)
    for block in tower.blocks:
        for p in (block.attn.w_q, block.attn.w_k, block.attn.w_v, block.attn.w_o):
            add(p)
        for ln in (block.ln1, block.ln2):
            add(ln.gain)
            add(ln.bias)
        add(block.w_mlp_in)
        add(block.w_mlp_out)
    for slot in tower.petl:
        if slot.prefix is not None:
            add(slot.prefix.p_k)
            add(slot.prefix.p_v)
            add(slot.prefix.s_p)
        for pair in (slot.lora_k, slot.lora_v):
            if pair is not None:
                add(pair.w_down)
                add(pair.w_up)
                add(pair.s)
        for adapter in (slot.adapter1, slot.adapter2):
            if adapter is not None:
                add(adapter.w_down)
                add(adapter.w_up)
                add(adapter.s)
    add(tower.proj)
    return out


def model_params(model: DualTowerState) -> list[tuple[str, ParamTensor]]:
    return named_params(model.image) + named_params(model.text)


def set_backbone_trainable(model: DualTowerState, trainable: bool) -> None:
    """Flip the trainable flag on every backbone tensor (tuning tensors are
    managed by attach_petl)."""
    for _, p in model_params(model):
        if ".petl." not in p.name:
            p.trainable = trainable
            if not trainable:
                p.zero_grad()


def zero_grads(model: DualTowerState) -> None:
    for _, p in model_params(model):
        p.zero_grad()


def partition_params(model: DualTowerState, petl: PETLConfig):
    """Exact name -> count report split by the trainable flag.

    Returns (frozen, trainable, counts) where counts carries the totals and
    the trainable fraction.
    """
    frozen, trainable = [], []
    for name, p in model_params(model):
        (trainable if p.trainable else frozen).append((name, p.size))
    n_train = sum(c for _, c in trainable)
    n_total = n_train + sum(c for _, c in frozen)
    counts = {
        "trainable": n_train,
        "total": n_total,
        "fraction": (n_train / n_total) if n_total else 0.0,
    }
    return frozen, trainable, counts


def param_manifest(
    image_cfg: ImageEncoderConfig,
    text_cfg: TextEncoderConfig,
    d_out: int,
    petl: PETLConfig | None,
) -> list[tuple[str, tuple[int, ...], bool]]:
    """Shape-only enumeration of (name, shape, trainable) without allocating
    tensors; usable at full CLIP-scale dimensions for parameter accounting."""
    rows: list[tuple[str, tuple[int, ...], bool]] = []

    def tower_rows(kind: str, d: int, layers: int):
        if kind == "image":
            rows.append(("image.patch_embed", (image_cfg.patch_dim, d), False))
            rows.append(("image.cls", (d,), False))
            rows.append(("image.pos", (image_cfg.seq_len, d), False))
        else:
            rows.append(("text.token_embed", (text_cfg.vocab, d), False))
            rows.append(("text.pos", (text_cfg.max_len, d), False))
        ln_trainable = petl is not None and petl.l_adapter and petl.placement == "ln_tuning"
        for i in range(layers):
            for nm in ("w_q", "w_k", "w_v", "w_o"):
                rows.append((f"{kind}.blocks.{i}.attn.{nm}", (d, d), False))
            for ln in ("ln1", "ln2"):
                rows.append((f"{kind}.blocks.{i}.{ln}.gain", (d,), ln_trainable))
                rows.append((f"{kind}.blocks.{i}.{ln}.bias", (d,), ln_trainable))
            rows.append((f"{kind}.blocks.{i}.mlp.w_in", (d, 4 * d), False))
            rows.append((f"{kind}.blocks.{i}.mlp.w_out", (4 * d, d), False))
        if petl is not None:
            for i in range(layers):
                if petl.sprefix and petl.prefix_len > 0:
                    rows.append((f"{kind}.petl.{i}.prefix.p_k", (petl.prefix_len, d), True))
                    rows.append((f"{kind}.petl.{i}.prefix.p_v", (petl.prefix_len, d), True))
                    rows.append((f"{kind}.petl.{i}.prefix.s_p", (), True))
                if petl.lora:
                    for proj in ("k", "v"):
                        rows.append((f"{kind}.petl.{i}.lora_{proj}.w_down", (d, petl.lora_rank), True))
                        rows.append((f"{kind}.petl.{i}.lora_{proj}.w_up", (petl.lora_rank, d), True))
                        rows.append((f"{kind}.petl.{i}.lora_{proj}.s", (), True))
                if petl.l_adapter and petl.placement != "ln_tuning":
                    for site in ("1", "2"):
                        rows.append(
                            (f"{kind}.petl.{i}.adapter{site}.w_down", (d, petl.adapter_bottleneck), True)
                        )
                        rows.append(
                            (f"{kind}.petl.{i}.adapter{site}.w_up", (petl.adapter_bottleneck, d), True)
                        )
                        rows.append((f"{kind}.petl.{i}.adapter{site}.s", (), True))
        rows.append((f"{kind}.proj", (d, d_out), False))

    tower_rows("image", image_cfg.d, image_cfg.layers)
    tower_rows("text", text_cfg.d, text_cfg.layers)
    return rows


def manifest_counts(manifest) -> dict[str, float]:
    n_train = sum(int(np.prod(s)) for _, s, t in manifest if t)
    n_total = sum(int(np.prod(s)) for _, s, _ in manifest)
    return {"trainable": n_train, "total": n_total, "fraction": n_train / n_total}


# ---------------------------------------------------------------------------
# forward / backward


def _mlp_fwd(x: np.ndarray, block: BlockState):
    pre = x @ block.w_mlp_in.value
    act = activation("gelu", pre)
    return act @ block.w_mlp_out.value, (x, pre, act)


def _mlp_bwd(g: np.ndarray, cache, block: BlockState) -> np.ndarray:
    x, pre, act = cache
    block.w_mlp_out.add_grad(flat_weight_grad(act, g))
    dpre = activation_backward("gelu", pre, g @ block.w_mlp_out.value.T)
    block.w_mlp_in.add_grad(flat_weight_grad(x, dpre))
    return dpre @ block.w_mlp_in.value.T


def _active_petl(slot: BlockPETL, petl: PETLConfig) -> BlockPETL:
    """Project the attached tensors through the component toggles."""
    return BlockPETL(
        prefix=slot.prefix if petl.sprefix else None,
        lora_k=slot.lora_k if petl.lora else None,
        lora_v=slot.lora_v if petl.lora else None,
        adapter1=slot.adapter1 if petl.l_adapter else None,
        adapter2=slot.adapter2 if petl.l_adapter else None,
    )


def _site_placement(petl: PETLConfig, adapter) -> AdapterPlacement:
    if petl.l_adapter and (adapter is not None or petl.placement == "ln_tuning"):
        return AdapterPlacement(petl.placement)
    return AdapterPlacement("ln_tuning")  # plain layernorm route


def block_forward_fwd(
    x: np.ndarray, block: BlockState, slot: BlockPETL, petl: PETLConfig, mask: AttnMask
):
    if x.shape[-1] != block.attn.d:
        raise ShapeError(f"input width {x.shape[-1]} does not match block width {block.attn.d}")
    active = _active_petl(slot, petl)

    def mha_fwd(z):
        return sprefix_attend_fwd(z, block.attn, active.prefix, active.lora_k, active.lora_v, mask)

    y1, c1 = placement_fwd(x, mha_fwd, block.ln1, active.adapter1, _site_placement(petl, active.adapter1))
    x_mid = y1 + x

    def mlp_fwd(z):
        return _mlp_fwd(z, block)

    y2, c2 = placement_fwd(
        x_mid, mlp_fwd, block.ln2, active.adapter2, _site_placement(petl, active.adapter2)
    )
    out = y2 + x_mid
    return out, (c1, c2, active)


def block_forward_bwd(g: np.ndarray, cache, block: BlockState) -> np.ndarray:
    c1, c2, active = cache

    def mha_bwd(gg, sub_cache):
        return sprefix_attend_bwd(gg, sub_cache, block.attn, active.prefix, active.lora_k, active.lora_v)

    def mlp_bwd(gg, sub_cache):
        return _mlp_bwd(gg, sub_cache, block)

    dx_mid = g + placement_bwd(g, c2, mlp_bwd, block.ln2, active.adapter2)
    dx = dx_mid + placement_bwd(dx_mid, c1, mha_bwd, block.ln1, active.adapter1)
    return dx


def block_forward(
    x: np.ndarray, block: BlockState, slot: BlockPETL, petl: PETLConfig, mask: AttnMask
) -> np.ndarray:
    out, _ = block_forward_fwd(x, block, slot, petl, mask)
    return out


# ---------------------------------------------------------------------------
# towers (single inputs or stacks with leading batch axes)


def encode_image_fwd(patches: np.ndarray, tower: TowerState, petl: PETLConfig):
    n_expected = tower.pos.shape[0] - 1
    if patches.ndim < 2 or patches.shape[-2] != n_expected:
        raise ShapeError(
            f"expected {n_expected} patch rows of width {tower.patch_embed.shape[0]}, got {patches.shape}"
        )
    lead = patches.shape[:-2]
    embedded = patches @ tower.patch_embed.value
    cls_row = np.broadcast_to(tower.cls.value, (*lead, 1, tower.d))
    seq = np.concatenate([cls_row, embedded], axis=-2) + tower.pos.value
    mask = AttnMask("none")

    block_caches = []
    acts = [seq]
    x = seq
    for block, slot in zip(tower.blocks, tower.petl):
        x, cache = block_forward_fwd(x, block, slot, petl, mask)
        block_caches.append(cache)
        acts.append(x)
    pooled = x[..., 0, :]
    projected = pooled @ tower.proj.value
    out = l2_normalize(projected)
    return out, {
        "patches": patches,
        "acts": acts,
        "block_caches": block_caches,
        "pooled": pooled,
        "projected": projected,
    }


def encode_image_bwd(g: np.ndarray, cache, tower: TowerState) -> None:
    dproj_out = l2_normalize_backward(g, cache["projected"])
    tower.proj.add_grad(flat_weight_grad(cache["pooled"], dproj_out))
    dpooled = dproj_out @ tower.proj.value.T

    dx = np.zeros_like(cache["acts"][-1])
    dx[..., 0, :] += dpooled
    for block, bcache in zip(reversed(tower.blocks), reversed(cache["block_caches"])):
        dx = block_forward_bwd(dx, bcache, block)

    tower.pos.add_grad(lead_sum(dx, 2))
    tower.cls.add_grad(lead_sum(dx[..., 0, :], 1))
    tower.patch_embed.add_grad(flat_weight_grad(cache["patches"], dx[..., 1:, :]))


def encode_image(patches: np.ndarray, tower: TowerState, petl: PETLConfig) -> np.ndarray:
    out, _ = encode_image_fwd(patches, tower, petl)
    return out


def frame_tokens(token_ids, cfg: TextEncoderConfig) -> list[int]:
    """BOS + content + EOS, truncating overlong content with EOS preserved."""
    ids = [int(t) for t in token_ids]
    if any(t < 0 or t >= cfg.vocab for t in ids):
        raise ConfigurationError("token id outside vocabulary")
    content = ids[: cfg.max_len - 2]
    return [BOS_ID] + content + [EOS_ID]


def mask_tokens(ids: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Replace non-special tokens by the mask id with the given probability.

    ``ids`` is [..., n] framed token ids; positions 0 and n-1 are special.
    """
    if rate <= 0.0:
        return ids
    masked = ids.copy()
    content = masked[..., 1:-1]
    content[rng.random(content.shape) < rate] = MASK_ID
    return masked


def _text_core_fwd(ids: np.ndarray, tower: TowerState, petl: PETLConfig):
    n = ids.shape[-1]
    seq = tower.token_embed.value[ids] + tower.pos.value[:n]
    mask = AttnMask("causal")

    block_caches = []
    acts = [seq]
    x = seq
    for block, slot in zip(tower.blocks, tower.petl):
        x, cache = block_forward_fwd(x, block, slot, petl, mask)
        block_caches.append(cache)
        acts.append(x)
    pooled = x[..., -1, :]  # EOS position carries the sequence summary
    projected = pooled @ tower.proj.value
    out = l2_normalize(projected)
    return out, {
        "ids": ids,
        "acts": acts,
        "block_caches": block_caches,
        "pooled": pooled,
        "projected": projected,
    }


def encode_text_fwd(
    token_ids,
    tower: TowerState,
    cfg: TextEncoderConfig,
    petl: PETLConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    ids = np.array(frame_tokens(token_ids, cfg))
    if training and cfg.mask_rate > 0.0:
        if rng is None:
            raise ConfigurationError("training-time masking needs a generator")
        ids = mask_tokens(ids, cfg.mask_rate, rng)
    return _text_core_fwd(ids, tower, petl)


def encode_text_batch_fwd(
    token_lists,
    tower: TowerState,
    cfg: TextEncoderConfig,
    petl: PETLConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Stack equal-length sequences and encode them in one pass."""
    framed = [frame_tokens(t, cfg) for t in token_lists]
    lengths = {len(f) for f in framed}
    if len(lengths) != 1:
        raise ShapeError(f"batched text encoding needs equal lengths, got {sorted(lengths)}")
    ids = np.array(framed)
    if training and cfg.mask_rate > 0.0:
        if rng is None:
            raise ConfigurationError("training-time masking needs a generator")
        ids = mask_tokens(ids, cfg.mask_rate, rng)
    return _text_core_fwd(ids, tower, petl)


def encode_text_bwd(g: np.ndarray, cache, tower: TowerState) -> None:
    dproj_out = l2_normalize_backward(g, cache["projected"])
    tower.proj.add_grad(flat_weight_grad(cache["pooled"], dproj_out))
    dpooled = dproj_out @ tower.proj.value.T

    dx = np.zeros_like(cache["acts"][-1])
    dx[..., -1, :] += dpooled
    for block, bcache in zip(reversed(tower.blocks), reversed(cache["block_caches"])):
        dx = block_forward_bwd(dx, bcache, block)

    ids = cache["ids"]
    if tower.token_embed.trainable:
        demb = np.zeros_like(tower.token_embed.value)
        np.add.at(demb, ids, dx)
        tower.token_embed.add_grad(demb)
    if tower.pos.trainable:
        dpos = np.zeros_like(tower.pos.value)
        dpos[: ids.shape[-1]] += lead_sum(dx, 2)
        tower.pos.add_grad(dpos)


def encode_text(
    token_ids,
    tower: TowerState,
    cfg: TextEncoderConfig,
    petl: PETLConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    out, _ = encode_text_fwd(token_ids, tower, cfg, petl, training, rng)
    return out

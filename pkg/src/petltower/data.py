"""Synthetic identity-paired corpus generation.

Each identity carries a latent vector. Images are per-patch linear
observations of the latent plus nuisance noise; texts are attribute-token
sequences that decode the latent through a fixed symbol codebook (one token
per latent dimension, token id encodes dimension and quantized level).

``domain_shift`` rotates the latent-to-patch observation maps between a base
basis and an independent alternate basis, creating a downstream domain while
the text codebook stays fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

# Special token ids for the toy vocabulary.
BOS_ID = 0
EOS_ID = 1
MASK_ID = 2
FIRST_ATTRIBUTE_ID = 3

# Structural world (observation bases, shared across corpora) is derived from
# a fixed seed so corpora from different specs live in comparable domains.
WORLD_SEED = 715517


@dataclass
class SyntheticSpec:
    num_identities: int = 64
    images_per_identity: int = 4
    texts_per_image: int = 2
    latent_dim: int = 4
    domain_shift: float = 0.0
    seed: int = 0
    num_patches: int = 16
    patch_dim: int = 12
    levels: int = 6
    image_noise: float = 0.05
    latent_jitter: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.domain_shift <= 1.0:
            raise ValueError("domain_shift must lie in [0, 1]")

    @property
    def vocab_needed(self) -> int:
        return FIRST_ATTRIBUTE_ID + self.latent_dim * self.levels


@dataclass
class PairRecord:
    identity: int
    patches: np.ndarray
    tokens: list[int]
    split: str


@dataclass
class Corpus:
    spec: SyntheticSpec
    records: list[PairRecord] = field(default_factory=list)

    @property
    def identities(self) -> list[int]:
        return [r.identity for r in self.records]


def _observation_maps(spec: SyntheticSpec) -> np.ndarray:
    """Per-patch latent-to-feature maps, rotated by the domain shift."""
    world = np.random.default_rng(WORLD_SEED)
    base = world.normal(0.0, 1.0, size=(spec.num_patches, spec.patch_dim, spec.latent_dim))
    alt = world.normal(0.0, 1.0, size=(spec.num_patches, spec.patch_dim, spec.latent_dim))
    angle = spec.domain_shift * np.pi / 2.0
    return np.cos(angle) * base + np.sin(angle) * alt


def quantize_latent(z: np.ndarray, levels: int) -> np.ndarray:
    """Map each latent coordinate to an equiprobable Gaussian level index."""
    edges = norm.ppf(np.arange(1, levels) / levels)
    return np.searchsorted(edges, z)


def attribute_tokens(z: np.ndarray, levels: int) -> list[int]:
    """One token per latent dimension, encoding (dimension, level)."""
    q = quantize_latent(z, levels)
    return [FIRST_ATTRIBUTE_ID + dim * levels + int(level) for dim, level in enumerate(q)]


def generate_dataset(spec: SyntheticSpec, split: str = "train") -> Corpus:
    """Deterministic paired corpus for one spec."""
    rng = np.random.default_rng(spec.seed)
    maps = _observation_maps(spec)
    latents = rng.normal(0.0, 1.0, size=(spec.num_identities, spec.latent_dim))

    records: list[PairRecord] = []
    for identity in range(spec.num_identities):
        z = latents[identity]
        tokens = attribute_tokens(z, spec.levels)
        for _ in range(spec.images_per_identity):
            z_img = z + spec.latent_jitter * rng.normal(size=spec.latent_dim)
            patches = np.einsum("pfl,l->pf", maps, z_img)
            patches += spec.image_noise * rng.normal(size=patches.shape)
            for _ in range(spec.texts_per_image):
                order = rng.permutation(len(tokens))
                records.append(
                    PairRecord(
                        identity=identity,
                        patches=patches.copy(),
                        tokens=[tokens[i] for i in order],
                        split=split,
                    )
                )
    return Corpus(spec=spec, records=records)


# ---------------------------------------------------------------------------
# JSONL export / import


def save_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus.records:
            fh.write(
                json.dumps(
                    {
                        "identity": r.identity,
                        "patches": r.patches.tolist(),
                        "tokens": r.tokens,
                        "split": r.split,
                    }
                )
            )
            fh.write("\n")


def load_jsonl(path: str | Path, spec: SyntheticSpec | None = None) -> Corpus:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            records.append(
                PairRecord(
                    identity=int(obj["identity"]),
                    patches=np.asarray(obj["patches"], dtype=np.float64),
                    tokens=[int(t) for t in obj["tokens"]],
                    split=str(obj["split"]),
                )
            )
    return Corpus(spec=spec if spec is not None else SyntheticSpec(), records=records)

"""Discriminator-driven pseudo-label retrieval over sampled candidate pools."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample
from .models import ParamStore, encode_caption, encode_image

IMAGE_TO_CAPTION = "image->caption"
CAPTION_TO_IMAGE = "caption->image"


@dataclass
class CandidatePool:
    ids: np.ndarray          # ascending
    latents: np.ndarray      # (len(ids), latent_dim), row i belongs to ids[i]
    source: str              # "images" or "captions"
    fraction: float

    def __len__(self):
        return len(self.ids)


@dataclass
class PseudoPair:
    anchor_id: int
    retrieved_id: int
    direction: str
    alpha: float


def encode_samples(params: ParamStore, samples: Sequence[Sample], modality: str) -> np.ndarray:
    """Forward-only latents for a list of samples (``modality`` is "images" or "captions")."""
    with ad.no_grad():
        if modality == "images":
            return encode_image(params, np.stack([s.image for s in samples])).value
        if modality == "captions":
            return encode_caption(params, [s.caption for s in samples]).value
    raise ValueError(f"unknown modality {modality!r}")


def pool_size(n: int, fraction: float) -> int:
    return max(1, int(round(fraction * n)))


def sample_pool(source: Sequence[Sample], fraction: float, rng, params: ParamStore,
                modality: str) -> CandidatePool:
    """Uniform subset without replacement, encoded once with the current parameters."""
    if not source:
        raise ValueError("cannot sample a pool from an empty source")
    if not 0 < fraction <= 1:
        raise ValueError("pool fraction must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    n = pool_size(len(source), fraction)
    picked = rng.choice(len(source), size=n, replace=False) if n < len(source) else np.arange(len(source))
    chosen = sorted((source[i] for i in picked), key=lambda s: s.id)
    latents = encode_samples(params, chosen, modality)
    return CandidatePool(np.array([s.id for s in chosen]), latents, modality, fraction)


def score_matrix(params: ParamStore, zx: np.ndarray, zy: np.ndarray) -> np.ndarray:
    """D(zx_i, zy_j) for every row pair, shape ``(len(zx), len(zy))``, no tape."""
    D = params["D"]
    d = params.config.latent_dim
    W1 = D["W1"].value
    a = zx @ W1[:d]                                # (B, h)
    b = zy @ W1[d:] + D["b1"].value                # (P, h)
    h = np.maximum(a[:, None, :] + b[None, :, :], 0.0)
    h = np.maximum(h @ D["W2"].value + D["b2"].value, 0.0)
    logit = (h @ D["W3"].value + D["b3"].value)[..., 0]
    return 1.0 / (1.0 + np.exp(-logit))


def assign_pseudo_captions(params: ParamStore, zx: np.ndarray, anchor_ids: Iterable[int],
                           pool: CandidatePool) -> list:
    """For each image latent, the pool caption with the highest pair score (lowest id on ties)."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    scores = score_matrix(params, np.atleast_2d(zx), pool.latents)
    best = scores.argmax(axis=1)
    return [PseudoPair(int(a), int(pool.ids[j]), IMAGE_TO_CAPTION, float(scores[i, j]))
            for i, (a, j) in enumerate(zip(anchor_ids, best))]


def assign_pseudo_images(params: ParamStore, zy: np.ndarray, anchor_ids: Iterable[int],
                         pool: CandidatePool) -> list:
    """For each caption latent, the pool image with the highest pair score (lowest id on ties)."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    scores = score_matrix(params, pool.latents, np.atleast_2d(zy))
    best = scores.argmax(axis=0)
    return [PseudoPair(int(a), int(pool.ids[j]), CAPTION_TO_IMAGE, float(scores[j, i]))
            for i, (a, j) in enumerate(zip(anchor_ids, best))]


def assign_pseudo_caption(x: Sample, pool: CandidatePool, params: ParamStore) -> PseudoPair:
    return assign_pseudo_captions(params, encode_samples(params, [x], "images"), [x.id], pool)[0]


def assign_pseudo_image(y: Sample, pool: CandidatePool, params: ParamStore) -> PseudoPair:
    return assign_pseudo_images(params, encode_samples(params, [y], "captions"), [y.id], pool)[0]


def write_assignments(fh, iteration: int, pairs: Iterable[PseudoPair]) -> None:
    """Append assignment records as JSON lines to an open text file."""
    for p in pairs:
        rec = {"iteration": iteration, **asdict(p)}
        fh.write(json.dumps(rec) + "\n")


def read_assignments(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

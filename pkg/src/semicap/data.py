"""Synthetic scarcely-paired benchmark, splits and the JSONL dataset format.

Each concept is a set of ``m`` attributes.  An "image" is the mean of the
concept's attribute embedding rows plus Gaussian noise; a "caption" is
BOS, a random ordering of the concept's attribute tokens, then EOS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Optional

import numpy as np

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
FORMAT_VERSION = 1


def attribute_token(a: int) -> int:
    return a + N_SPECIAL


def strip_special(tokens) -> list:
    """Drop BOS/EOS/PAD, keeping content tokens in order."""
    return [int(t) for t in tokens if t >= N_SPECIAL]


@dataclass
class GenConfig:
    num_concepts: int = 40
    attributes_per_concept: int = 3
    attribute_vocab: int = 24
    samples_per_concept: int = 125
    image_dim: int = 32
    noise_sigma: float = 0.1
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        return self.attribute_vocab + N_SPECIAL

    def validate(self) -> None:
        if self.attributes_per_concept > self.attribute_vocab:
            raise ValueError("attributes_per_concept cannot exceed attribute_vocab")
        if min(self.num_concepts, self.attributes_per_concept, self.samples_per_concept, self.image_dim) < 1:
            raise ValueError("counts and dimensions must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        n_subsets = comb(self.attribute_vocab, self.attributes_per_concept)
        if self.num_concepts > n_subsets:
            raise ValueError(f"num_concepts={self.num_concepts} exceeds the {n_subsets} distinct attribute subsets")


@dataclass(frozen=True)
class Sample:
    id: int
    concept_id: Optional[int]
    image: Optional[np.ndarray]
    caption: Optional[tuple]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_image = (self.image is None and other.image is None) or (
            self.image is not None and other.image is not None and np.array_equal(self.image, other.image))
        return (self.id == other.id and self.concept_id == other.concept_id
                and same_image and self.caption == other.caption)

    __hash__ = None


@dataclass
class Dataset:
    samples: list
    image_dim: int
    vocab_size: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def has_concepts(self) -> bool:
        return bool(self.samples) and all(s.concept_id is not None for s in self.samples)


@dataclass
class SplitBundle:
    paired: list
    unpaired_images: list
    unpaired_captions: list
    test: list
    image_dim: int
    vocab_size: int
    by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.by_id:
            for s in self.paired + self.unpaired_images + self.unpaired_captions + self.test:
                self.by_id[s.id] = s

    @property
    def has_concepts(self) -> bool:
        return all(s.concept_id is not None for s in self.by_id.values())


def generate(config: GenConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    A, m, K = config.attribute_vocab, config.attributes_per_concept, config.num_concepts
    embedding = rng.standard_normal((A, config.image_dim))
    concepts, seen = [], set()
    while len(concepts) < K:
        subset = tuple(sorted(rng.choice(A, size=m, replace=False).tolist()))
        if subset not in seen:
            seen.add(subset)
            concepts.append(subset)
    samples = []
    for k, attrs in enumerate(concepts):
        center = embedding[list(attrs)].mean(axis=0)
        for _ in range(config.samples_per_concept):
            image = center + config.noise_sigma * rng.standard_normal(config.image_dim)
            order = rng.permutation(m)
            caption = (BOS, *(attribute_token(attrs[j]) for j in order), EOS)
            samples.append(Sample(len(samples), k, image, caption))
    return Dataset(samples, config.image_dim, config.vocab_size)


def _withhold(s: Sample, keep: str) -> Sample:
    if keep == "image":
        return Sample(s.id, s.concept_id, s.image, None)
    return Sample(s.id, s.concept_id, None, s.caption)


def split_scarcely_paired(dataset: Dataset, paired_fraction: float, test_fraction: float = 0.1,
                          seed: int = 0) -> SplitBundle:
    """Shuffle into test / paired / unpaired; unpaired halves keep only images or only captions.

    Within every concept the unpaired remainder alternates between the
    image half and the caption half, so each concept with two or more
    unpaired samples shows up on both sides while no true pair spans them.
    A concept left with a single unpaired sample lands on the image side.
    """
    if not 0 < paired_fraction < 1:
        raise ValueError("paired_fraction must lie in (0, 1)")
    if not 0 <= test_fraction < 1 or paired_fraction + test_fraction >= 1:
        raise ValueError("test_fraction must be in [0, 1) and fractions must sum below 1")
    samples = list(dataset.samples)
    if not samples:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_test = int(round(test_fraction * len(samples)))
    test = [samples[i] for i in order[:n_test]]
    train = [samples[i] for i in order[n_test:]]
    n_paired = int(round(paired_fraction * len(train)))
    if n_paired == 0:
        raise ValueError(f"paired_fraction={paired_fraction} leaves no pairs out of {len(train)} "
                         "training samples; use a larger dataset or fraction")
    paired, rest = train[:n_paired], train[n_paired:]
    images, captions = [], []
    counters: dict = {}
    for i, s in enumerate(rest):
        # without concept ids, alternate globally
        key = s.concept_id
        slot = i if key is None else counters.get(key, 0)
        counters[key] = slot + 1
        (images if slot % 2 == 0 else captions).append(s)
    bundle = SplitBundle(paired, [_withhold(s, "image") for s in images],
                         [_withhold(s, "caption") for s in captions], test,
                         dataset.image_dim, dataset.vocab_size)
    if bundle.has_concepts:
        _check_recoverable(bundle)
    return bundle


def _check_recoverable(bundle: SplitBundle) -> None:
    # a concept with a single unpaired sample can only sit on one side
    unpaired: dict = {}
    for s in bundle.unpaired_images + bundle.unpaired_captions:
        unpaired[s.concept_id] = unpaired.get(s.concept_id, 0) + 1
    caption_concepts = {s.concept_id for s in bundle.unpaired_captions}
    missing = {s.concept_id for s in bundle.unpaired_images
               if unpaired[s.concept_id] >= 2} - caption_concepts
    if missing:
        raise AssertionError(f"unpaired images of concepts {sorted(missing)} have no same-concept caption")


# ---------------------------------------------------------------------------
# JSONL format

def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": FORMAT_VERSION, "image_dim": dataset.image_dim,
                             "vocab_size": dataset.vocab_size}) + "\n")
        for s in dataset.samples:
            rec = {"id": s.id, "features": s.image.tolist(), "tokens": list(s.caption)}
            if s.concept_id is not None:
                rec["concept_id"] = s.concept_id
            fh.write(json.dumps(rec) + "\n")


class DatasetFormatError(ValueError):
    pass


def load_external(path) -> Dataset:
    """Read a JSONL dataset: a header object, then one record per line."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}:1: malformed JSON ({e.msg})") from None
    if not isinstance(header, dict) or "format_version" not in header:
        raise DatasetFormatError(f"{path}:1: missing header with format_version")
    major = int(str(header["format_version"]).split(".")[0])
    if major != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}:1: unsupported format_version {header['format_version']}")
    image_dim, vocab_size = header.get("image_dim"), header.get("vocab_size")
    samples, ids = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
        for key in ("id", "features", "tokens"):
            if key not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: record missing {key!r}")
        features = np.asarray(rec["features"], dtype=np.float64)
        if features.ndim != 1:
            raise DatasetFormatError(f"{path}:{lineno}: features must be a flat array")
        if image_dim is None:
            image_dim = features.size
        if features.size != image_dim:
            raise DatasetFormatError(f"{path}:{lineno}: ragged features ({features.size} != {image_dim})")
        tokens = tuple(int(t) for t in rec["tokens"])
        if not tokens:
            raise DatasetFormatError(f"{path}:{lineno}: empty token list")
        if vocab_size is not None and max(tokens) >= vocab_size:
            raise DatasetFormatError(f"{path}:{lineno}: token id {max(tokens)} >= vocab_size {vocab_size}")
        if min(tokens) < 0:
            raise DatasetFormatError(f"{path}:{lineno}: negative token id")
        if rec["id"] in ids:
            raise DatasetFormatError(f"{path}:{lineno}: duplicate id {rec['id']}")
        ids.add(rec["id"])
        samples.append(Sample(rec["id"], rec.get("concept_id"), features, tokens))
    if vocab_size is None:
        vocab_size = max(max(s.caption) for s in samples) + 1 if samples else N_SPECIAL
    return Dataset(samples, int(image_dim or 0), int(vocab_size))

"""Caption decoding and metrics."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import BOS, EOS, PAD, N_SPECIAL, Sample, strip_special
from .models import ParamStore, decoder_init, decoder_step, encode_image
from .pseudo import CAPTION_TO_IMAGE, IMAGE_TO_CAPTION


@dataclass
class MetricsReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    token_f1: float
    pseudo_precision_x: Optional[float]
    pseudo_precision_y: Optional[float]
    n_test: int

    @classmethod
    def columns(cls) -> list:
        return list(cls.__dataclass_fields__)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


# ---------------------------------------------------------------------------
# decoding

def beam_search(step_fn: Callable, init_state, beam_size: int, max_len: int,
                bos: int = BOS, eos: int = EOS, banned: Sequence[int] = ()) -> tuple:
    """Beam search returning ``(tokens, log_prob)`` of the best finished sequence.

    ``step_fn(prefixes, state)`` gets the live prefixes (tuples starting with
    ``bos``) and a state whose arrays have one row per prefix, and returns
    ``(log_probs (n, vocab), new_state)``.  ``state`` is ``None`` or a tuple
    of arrays.  Sequences end at ``eos`` or when they reach ``max_len``
    tokens.  Ties in score go to the lexicographically smaller sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live = [((bos,), 0.0)]
    state = init_state
    finished = []
    while live:
        logp, state = step_fn([p for p, _ in live], state)
        logp = np.array(logp, dtype=np.float64)
        if banned:
            logp[:, list(banned)] = -np.inf
        cands = []
        for i, (prefix, score) in enumerate(live):
            row = logp[i]
            # only the best beam_size extensions of each prefix can survive
            top = np.argsort(-row, kind="stable")[:beam_size]
            for v in top:
                if np.isfinite(row[v]):
                    cands.append((score + float(row[v]), prefix + (int(v),), i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        cands = cands[:beam_size]
        live, rows = [], []
        for score, seq, i in cands:
            if seq[-1] == eos or len(seq) >= max_len:
                finished.append((seq, score))
            else:
                live.append((seq, score))
                rows.append(i)
        if live and state is not None:
            state = tuple(s[rows] for s in state)
        if finished and live:
            best_done = max(s for _, s in finished)
            if best_done >= max(s for _, s in live):
                break
    finished.sort(key=lambda f: (-f[1], f[0]))
    return finished[0]


def decode(params: ParamStore, zx, beam_size: int = 3, max_len: Optional[int] = None) -> tuple:
    """Caption for one image latent, framed BOS ... EOS (EOS absent if the length cap hit)."""
    max_len = max_len or params.config.max_seq_len
    with ad.no_grad():
        zx = ad.constant(np.asarray(zx, dtype=np.float64).reshape(1, -1))
        h, c = decoder_init(params, zx)

        def step(prefixes, state):
            h, c = state
            logp, h2, c2 = decoder_step(params, np.array([p[-1] for p in prefixes]),
                                        ad.constant(h), ad.constant(c))
            return logp.value, (h2.value, c2.value)

        seq, _ = beam_search(step, (h.value, c.value), beam_size, max_len, banned=(PAD, BOS))
    return seq


def caption_images(params: ParamStore, images: np.ndarray, beam_size: int = 3) -> list:
    with ad.no_grad():
        zx = encode_image(params, np.asarray(images, dtype=np.float64)).value
    return [decode(params, z, beam_size) for z in zx]


# ---------------------------------------------------------------------------
# metrics

def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates: Sequence[Sequence[int]], references: Sequence[Sequence[Sequence[int]]],
         max_n: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions for n = 1..max_n, geometric mean, brevity penalty.

    No smoothing: any zero precision gives 0.  The effective reference
    length for each candidate is the closest reference length (shorter on ties).
    """
    if len(candidates) == 0:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("one reference list per candidate is required")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        refs = [list(r) for r in refs]
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def bleu_tokens(seq) -> list:
    """Sequence as scored by BLEU: content tokens, then EOS if the caption was terminated."""
    out = []
    for t in seq:
        if t == EOS:
            out.append(EOS)
            break
        if t >= N_SPECIAL:
            out.append(int(t))
    return out


def token_f1(predicted: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> float:
    """Mean per-caption F1 between predicted and gold content-token sets."""
    scores = []
    for p, g in zip(predicted, gold):
        p, g = set(strip_special(p)), set(strip_special(g))
        if not p and not g:
            scores.append(1.0)
            continue
        tp = len(p & g)
        scores.append(0.0 if tp == 0 else 2 * tp / (len(p) + len(g)))
    return float(np.mean(scores)) if scores else 0.0


def pseudo_label_precision(records: Sequence[dict], concept_of: dict) -> tuple:
    """Fraction of assignments whose anchor and retrieved sample share a concept, per direction.

    ``records`` carry ``direction``, ``anchor_id`` and ``retrieved_id``;
    ``concept_of`` maps sample id to concept id.  A direction without
    records yields ``None``.
    """
    hits = {IMAGE_TO_CAPTION: [0, 0], CAPTION_TO_IMAGE: [0, 0]}
    for rec in records:
        a, r = rec["anchor_id"], rec["retrieved_id"]
        if a not in concept_of or r not in concept_of:
            raise KeyError(f"unknown sample id in assignment {a} -> {r}")
        if concept_of[a] is None or concept_of[r] is None:
            raise ValueError("pseudo-label precision needs concept ids")
        h = hits[rec["direction"]]
        h[0] += concept_of[a] == concept_of[r]
        h[1] += 1
    return tuple(h[0] / h[1] if h[1] else None for h in (hits[IMAGE_TO_CAPTION], hits[CAPTION_TO_IMAGE]))


def evaluate(params: ParamStore, test: Sequence[Sample], beam_size: int = 3,
             assignments: Optional[Sequence[dict]] = None, concept_of: Optional[dict] = None) -> MetricsReport:
    """Decode every test image and score against references.

    References are all test captions of the image's concept, or only its
    own caption when concept ids are missing.
    """
    if not test:
        raise ValueError("empty test split")
    preds = caption_images(params, np.stack([s.image for s in test]), beam_size)
    have_concepts = all(s.concept_id is not None for s in test)
    if have_concepts:
        by_concept: dict = {}
        for s in test:
            by_concept.setdefault(s.concept_id, []).append(bleu_tokens(s.caption))
        refs = [by_concept[s.concept_id] for s in test]
    else:
        refs = [[bleu_tokens(s.caption)] for s in test]
    cands = [bleu_tokens(p) for p in preds]
    scores = [bleu(cands, refs, n) for n in range(1, 5)]
    px = py = None
    if assignments and concept_of is not None and all(v is not None for v in concept_of.values()):
        px, py = pseudo_label_precision(assignments, concept_of)
    return MetricsReport(*scores, token_f1(preds, [s.caption for s in test]), px, py, len(test))

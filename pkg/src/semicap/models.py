"""Image encoder, caption encoder/decoder, feature transformers and discriminators.

All forward functions are batched: images are ``(B, image_dim)`` rows and
captions are padded ``(B, T)`` integer arrays framed BOS ... EOS.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import EOS, PAD

GENERATOR_ROLES = ("F", "G", "H", "Tvc", "Tcv")
DISCRIMINATOR_ROLES = ("D", "Dx", "Dy")
ROLES = GENERATOR_ROLES + DISCRIMINATOR_ROLES
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_dim: int = 32
    latent_dim: int = 64
    vocab_size: int = 27
    embed_dim: int = 32
    lstm_hidden: int = 64
    transformer_layers: int = 4
    disc_hidden: int = 64
    max_seq_len: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.vocab_size <= EOS:
            raise ValueError("vocab_size must leave room for PAD, BOS and EOS")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must fit at least BOS and EOS")


class ParamStore:
    """Learnable arrays grouped by network role.

    Names are qualified as ``"<role>.<name>"`` whenever a flat view is
    needed (optimizer state, checkpoints).
    """

    def __init__(self, config: ModelConfig, roles: dict | None = None):
        self.config = config
        self.roles = {r: {} for r in ROLES}
        for role, arrays in (roles or {}).items():
            if role not in self.roles:
                raise KeyError(f"unknown role {role!r}")
            for name, value in arrays.items():
                self.roles[role][name] = ad.parameter(value, name=f"{role}.{name}")

    def __getitem__(self, role: str) -> dict:
        return self.roles[role]

    def subset(self, roles: Iterable[str]) -> dict:
        return {f"{r}.{n}": p for r in roles for n, p in self.roles[r].items()}

    def generator(self) -> dict:
        return self.subset(GENERATOR_ROLES)

    def discriminator(self) -> dict:
        return self.subset(DISCRIMINATOR_ROLES)

    def flat(self) -> dict:
        return self.subset(ROLES)

    def snapshot(self) -> dict:
        return {k: p.value.copy() for k, p in self.flat().items()}

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, {r: {n: p.value for n, p in a.items()} for r, a in self.roles.items()})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    d, V, E, Hh, Dh = (config.latent_dim, config.vocab_size, config.embed_dim,
                       config.lstm_hidden, config.disc_hidden)
    zeros = lambda n: np.zeros((1, n))  # noqa: E731

    def lstm_bias():
        b = zeros(4 * Hh)
        b[0, Hh:2 * Hh] = 1.0  # forget gate
        return b

    def mlp(sizes):
        out = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            out[f"W{i}"] = _glorot(rng, a, b)
            out[f"b{i}"] = zeros(b)
        return out

    roles = {
        "F": mlp([config.image_dim, d, d]),
        "G": {"E": rng.normal(0.0, 0.1, size=(V, E)), "W": _glorot(rng, E + Hh, 4 * Hh),
              "b": lstm_bias(), "Wp": _glorot(rng, Hh, d), "bp": zeros(d)},
        "H": {"E": rng.normal(0.0, 0.1, size=(V, E)),
              "Wh0": _glorot(rng, d, Hh), "bh0": zeros(Hh),
              "Wc0": _glorot(rng, d, Hh), "bc0": zeros(Hh),
              "W": _glorot(rng, E + Hh, 4 * Hh), "b": lstm_bias(),
              "Wo": _glorot(rng, Hh, V), "bo": zeros(V)},
        "Tvc": mlp([d] * (config.transformer_layers + 1)),
        "Tcv": mlp([d] * (config.transformer_layers + 1)),
        "D": mlp([2 * d, Dh, Dh, 1]),
        "Dx": mlp([d, Dh, Dh, 1]),
        "Dy": mlp([d, Dh, Dh, 1]),
    }
    return ParamStore(config, roles)


# ---------------------------------------------------------------------------
# batching helpers

def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences with PAD; returns ``(ids, lengths)``."""
    if len(seqs) == 0:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
    return ids, lengths


def _as_batch(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a caption batch to ``(ids, lengths)``.

    Accepts an ``(ids, lengths)`` tuple, a PAD-padded 2-D integer array, a
    list of sequences, or one flat sequence.
    """
    if (isinstance(tokens, tuple) and len(tokens) == 2
            and isinstance(tokens[0], np.ndarray) and tokens[0].ndim == 2):
        return tokens
    if isinstance(tokens, np.ndarray):
        if tokens.ndim == 2:
            return tokens.astype(np.int64), (tokens != PAD).sum(axis=1)
        return pad_batch([tokens.tolist()])
    tokens = list(tokens)
    if tokens and np.ndim(tokens[0]) == 0:
        return pad_batch([tokens])
    return pad_batch(tokens)


def _check_tokens(ids: np.ndarray, lengths: np.ndarray, config: ModelConfig) -> None:
    if ids.size == 0 or (lengths < 1).any():
        raise ValueError("caption sequences must be non-empty")
    if (ids < 0).any() or (ids >= config.vocab_size).any():
        raise ValueError(f"token id out of vocabulary (vocab_size={config.vocab_size})")


def _onehot(ids: np.ndarray, V: int) -> np.ndarray:
    out = np.zeros((ids.shape[0], V))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def _check_dim(z: Node, dim: int, what: str) -> None:
    if z.shape[1] != dim:
        raise ad.ShapeError(f"{what}: expected {dim} features, got shape {z.shape}")


# ---------------------------------------------------------------------------
# networks

def encode_image(params: ParamStore, x) -> Node:
    """F: two affine layers with a ReLU between them."""
    x = ad.constant(x)
    _check_dim(x, params.config.image_dim, "encode_image")
    F = params["F"]
    return ad.linear(ad.relu(ad.linear(x, F["W1"], F["b1"])), F["W2"], F["b2"])


def lstm_step(W: Node, b: Node, x: Node, h: Node, c: Node) -> tuple[Node, Node]:
    """One LSTM cell update; gate order in ``W`` columns is input, forget, cell, output."""
    n = h.shape[1]
    z = ad.linear(ad.concat_cols(x, h), W, b)
    hc = ad.lstm_cell(z, c)
    return ad.slice_cols(hc, 0, n), ad.slice_cols(hc, n, 2 * n)


def _masked(new: Node, old: Node, keep: np.ndarray) -> Node:
    # keep[i] == 1 where row i is still inside its sequence; exact for 0/1 masks
    return ad.add(ad.mul(new, ad.constant(keep)), ad.mul(old, ad.constant(1.0 - keep)))


def encode_caption(params: ParamStore, tokens) -> Node:
    """G: single-layer LSTM over embedded tokens; last real step projected to the latent size."""
    ids, lengths = _as_batch(tokens)
    cfg = params.config
    _check_tokens(ids, lengths, cfg)
    G = params["G"]
    B, T = ids.shape
    n = cfg.lstm_hidden
    # h and c travel together as one (B, 2H) block
    hc = ad.constant(np.zeros((B, 2 * n)))
    for t in range(T):
        x = ad.matmul(ad.constant(_onehot(ids[:, t], cfg.vocab_size)), G["E"])
        z = ad.linear(ad.concat_cols(x, ad.slice_cols(hc, 0, n)), G["W"], G["b"])
        new = ad.lstm_cell(z, ad.slice_cols(hc, n, 2 * n))
        done = t >= lengths
        hc = _masked(new, hc, (~done).astype(np.float64)[:, None]) if done.any() else new
    return ad.linear(ad.slice_cols(hc, 0, n), G["Wp"], G["bp"])


def decoder_init(params: ParamStore, zx: Node) -> tuple[Node, Node]:
    H = params["H"]
    return ad.linear(zx, H["Wh0"], H["bh0"]), ad.linear(zx, H["Wc0"], H["bc0"])


def decoder_step(params: ParamStore, token_ids: np.ndarray, h: Node, c: Node) -> tuple[Node, Node, Node]:
    """Feed one token per row; returns ``(log_probs, h, c)`` for the next token."""
    H = params["H"]
    x = ad.matmul(ad.constant(_onehot(np.asarray(token_ids), params.config.vocab_size)), H["E"])
    h, c = lstm_step(H["W"], H["b"], x, h, c)
    return ad.log_softmax_rows(ad.linear(h, H["Wo"], H["bo"])), h, c


def decode_teacher_forced(params: ParamStore, zx, tokens) -> list:
    """H with gold inputs: entry ``t`` holds log p(y_{t+1} | y_{<=t}, zx) for each row."""
    ids, lengths = _as_batch(tokens)
    cfg = params.config
    _check_tokens(ids, lengths, cfg)
    zx = ad.constant(zx)
    _check_dim(zx, cfg.latent_dim, "decode_teacher_forced")
    if zx.shape[0] != ids.shape[0]:
        raise ad.ShapeError(f"decode_teacher_forced: {zx.shape[0]} latents for {ids.shape[0]} captions")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"caption length {ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    h, c = decoder_init(params, zx)
    out = []
    for t in range(ids.shape[1] - 1):
        logp, h, c = decoder_step(params, ids[:, t], h, c)
        out.append(logp)
    return out


def target_weights(tokens, vocab_size: int) -> list:
    """Per-step one-hot targets for ``y_{t+1}``; PAD targets and steps past the end are zero rows."""
    ids, lengths = _as_batch(tokens)
    out = []
    for t in range(ids.shape[1] - 1):
        w = _onehot(ids[:, t + 1], vocab_size)
        w[(t + 1) >= lengths] = 0.0
        out.append(w)
    return out


def sequence_log_likelihood(step_logps: list, tokens, normalize: bool = False) -> Node:
    """Per-row ``log p(y | zx)`` as a ``(B, 1)`` column, optionally divided by the step count."""
    ids, lengths = _as_batch(tokens)
    if len(step_logps) != ids.shape[1] - 1:
        raise ad.ShapeError(f"{len(step_logps)} decoder steps for captions of length {ids.shape[1]}")
    V = step_logps[0].shape[1]
    total = None
    for logp, w in zip(step_logps, target_weights((ids, lengths), V)):
        term = ad.row_sum(ad.mul(logp, ad.constant(w)))
        total = term if total is None else ad.add(total, term)
    if normalize:
        total = ad.mul(total, ad.constant(1.0 / np.maximum(lengths - 1, 1)[:, None].astype(np.float64)))
    return total


def transform_feature(params: ParamStore, direction: str, z) -> Node:
    """T_{v->c} (``"vc"``) or T_{c->v} (``"cv"``): affine layers with ReLU between, none after the last."""
    role = {"vc": "Tvc", "v->c": "Tvc", "cv": "Tcv", "c->v": "Tcv"}.get(direction)
    if role is None:
        raise ValueError(f"unknown direction {direction!r}")
    z = ad.constant(z)
    _check_dim(z, params.config.latent_dim, "transform_feature")
    T = params[role]
    n = params.config.transformer_layers
    for i in range(1, n + 1):
        z = ad.linear(z, T[f"W{i}"], T[f"b{i}"])
        if i < n:
            z = ad.relu(z)
    return z


def _mlp_logit(P: dict, h: Node) -> Node:
    h = ad.relu(ad.linear(h, P["W1"], P["b1"]))
    h = ad.relu(ad.linear(h, P["W2"], P["b2"]))
    return ad.linear(h, P["W3"], P["b3"])


def discriminator_logit(params: ParamStore, zx, zy) -> Node:
    zx, zy = ad.constant(zx), ad.constant(zy)
    d = params.config.latent_dim
    _check_dim(zx, d, "discriminate (image slot)")
    _check_dim(zy, d, "discriminate (caption slot)")
    return _mlp_logit(params["D"], ad.concat_cols(zx, zy))


def discriminate(params: ParamStore, zx, zy) -> Node:
    """D: pair score in (0, 1); the (image, caption) slot order matters."""
    return ad.sigmoid(discriminator_logit(params, zx, zy))


def domain_logit(params: ParamStore, role: str, z) -> Node:
    """Single-domain discriminators D_x / D_y used by the CycleGAN baseline."""
    if role not in ("Dx", "Dy"):
        raise ValueError(f"unknown domain discriminator {role!r}")
    z = ad.constant(z)
    _check_dim(z, params.config.latent_dim, role)
    return _mlp_logit(params[role], z)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ParamStore, path, extra: dict | None = None) -> None:
    doc = {
        "format": "semicap-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "extra": extra or {},
        "params": {
            role: {name: {"shape": list(p.value.shape), "values": p.value.ravel().tolist()}
                   for name, p in arrays.items()}
            for role, arrays in params.roles.items()
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "semicap-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    if int(doc.get("version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    roles = {
        role: {name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
               for name, entry in arrays.items()}
        for role, arrays in doc["params"].items()
    }
    return ParamStore(config, roles), doc.get("extra", {})

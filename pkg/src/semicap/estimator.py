"""scikit-learn style facade: ``SemiSupervisedCaptioner().fit(X, y, X_unpaired, y_unpaired)``."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import BOS, EOS, N_SPECIAL, Sample, SplitBundle
from .evaluate import bleu, bleu_tokens, caption_images
from .losses import LossWeights
from .trainer import VARIANTS, TrainConfig, model_config_for, train


def _check_captions(y, name: str) -> list:
    if y is None:
        return []
    out = []
    for i, seq in enumerate(y):
        seq = tuple(int(t) for t in seq)
        if len(seq) < 2 or seq[0] != BOS or seq[-1] != EOS:
            raise ValueError(f"{name}[{i}] must be a BOS ... EOS framed token sequence")
        if min(seq) < 0:
            raise ValueError(f"{name}[{i}] has a negative token id")
        out.append(seq)
    return out


class SemiSupervisedCaptioner(BaseEstimator):
    """Captioner trained on few pairs plus unpaired images and captions.

    ``X`` rows are image feature vectors; ``y`` entries are token sequences
    framed as ``(BOS, ..., EOS)`` with content ids >= 3.  ``variant`` picks
    the training recipe (``paired-only``, ``cyclegan``, ``ver1``, ``ver2``
    or ``final``).  Fitted attributes: ``params_``, ``history_``,
    ``vocab_size_``, ``n_features_in_``.
    """

    def __init__(self, variant: str = "final", iterations: int = 3000, batch_size: int = 32,
                 warmup_iters: int = 200, pool_fraction: float = 0.01, lr: float = 5e-4,
                 latent_dim: int = 64, embed_dim: int = 32, lstm_hidden: int = 64, disc_hidden: int = 64,
                 lambda_x: float = 0.1, lambda_y: float = 0.1, lambda_reg: float = 0.1,
                 w_gan: float = 0.1, w_triplet: float = 0.1, beam_size: int = 3,
                 vocab_size: Optional[int] = None, random_state: int = 0):
        self.variant = variant
        self.iterations = iterations
        self.batch_size = batch_size
        self.warmup_iters = warmup_iters
        self.pool_fraction = pool_fraction
        self.lr = lr
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.lstm_hidden = lstm_hidden
        self.disc_hidden = disc_hidden
        self.lambda_x = lambda_x
        self.lambda_y = lambda_y
        self.lambda_reg = lambda_reg
        self.w_gan = w_gan
        self.w_triplet = w_triplet
        self.beam_size = beam_size
        self.vocab_size = vocab_size
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        weights = LossWeights(self.lambda_x, self.lambda_y, self.lambda_reg, self.w_gan, self.w_triplet)
        return TrainConfig(variant=self.variant, batch_size=self.batch_size, iterations=self.iterations,
                           warmup_iters=self.warmup_iters, pool_fraction=self.pool_fraction,
                           seed=self.random_state, weights=weights, lr=self.lr, eval_every=0,
                           beam_size=self.beam_size)

    def fit(self, X, y, X_unpaired=None, y_unpaired=None):
        X = check_array(X, dtype=np.float64)
        y = _check_captions(y, "y")
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)} captions")
        Xu = None if X_unpaired is None else check_array(X_unpaired, dtype=np.float64)
        if Xu is not None and Xu.shape[1] != X.shape[1]:
            raise ValueError(f"X_unpaired has {Xu.shape[1]} features, X has {X.shape[1]}")
        yu = _check_captions(y_unpaired, "y_unpaired")
        config = self._train_config()

        vocab = self.vocab_size or max(max(s) for s in y + yu) + 1
        if vocab <= N_SPECIAL or max(max(s) for s in y + yu) >= vocab:
            raise ValueError(f"token ids must lie in [0, {vocab})")

        ids = iter(range(10 ** 9))
        paired = [Sample(next(ids), None, x, c) for x, c in zip(X, y)]
        images = [Sample(next(ids), None, x, None) for x in (Xu if Xu is not None else [])]
        captions = [Sample(next(ids), None, None, c) for c in yu]
        bundle = SplitBundle(paired, images, captions, [], X.shape[1], vocab)
        model_config = model_config_for(bundle, latent_dim=self.latent_dim, embed_dim=self.embed_dim,
                                        lstm_hidden=self.lstm_hidden, disc_hidden=self.disc_hidden)
        result = train(config, bundle, model_config)
        self.params_ = result.params
        self.history_ = result.history
        self.vocab_size_ = vocab
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> list:
        """Beam-search caption (BOS-framed token tuple) per row of ``X``."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return caption_images(self.params_, X, self.beam_size)

    def score(self, X, y: Sequence) -> float:
        """Corpus BLEU-4 of the predicted captions against ``y`` (one reference each)."""
        y = _check_captions(y, "y")
        preds = self.predict(X)
        if len(preds) != len(y):
            raise ValueError("X and y lengths differ")
        return bleu([bleu_tokens(p) for p in preds], [[bleu_tokens(t)] for t in y], 4)

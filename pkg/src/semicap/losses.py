"""Training objectives as differentiable scalars.

Discriminator-side losses are returned in negated form so one minimizer
serves both players.  Inputs that one player must not move are detached
here, not in the trainer, so every loss has an exactly-zero gradient with
respect to the parameters it is not meant to update.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .models import (ParamStore, decode_teacher_forced, discriminator_logit, domain_logit,
                     sequence_log_likelihood, transform_feature)


@dataclass
class LossWeights:
    lambda_x: float = 0.1
    lambda_y: float = 0.1
    lambda_reg: float = 0.1
    w_gan: float = 0.1
    w_triplet: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class LossReport:
    cap_paired: float = 0.0
    cap_pseudo_x: float = 0.0
    cap_pseudo_y: float = 0.0
    gan_d: float = 0.0
    gan_g: float = 0.0
    reg: float = 0.0
    triplet: float = 0.0
    cycle: float = 0.0
    total: float = 0.0

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def values(self) -> tuple:
        return astuple(self)


def _frozen(params: ParamStore, roles) -> ParamStore:
    """Shallow view of ``params`` whose ``roles`` hold constants sharing the same arrays."""
    view = ParamStore.__new__(ParamStore)
    view.config = params.config
    view.roles = dict(params.roles)
    for r in roles:
        view.roles[r] = {n: ad.stop_gradient(p) for n, p in params.roles[r].items()}
    return view


def _steps(logprobs) -> list:
    if isinstance(logprobs, Node):
        return [ad.slice_rows(logprobs, t, t + 1) for t in range(logprobs.shape[0])]
    return list(logprobs)


# ---------------------------------------------------------------------------
# captioning

def sequence_nll(logprobs, target) -> Node:
    """Per-caption negative log-likelihood, ``(B, 1)``."""
    return ad.neg(sequence_log_likelihood(_steps(logprobs), target))


def caption_ce(logprobs, target) -> Node:
    """Cross-entropy summed over steps and averaged over the batch (PAD targets ignored).

    ``logprobs`` is either the list returned by ``decode_teacher_forced``
    or, for a single caption, a ``(len(target) - 1, vocab)`` node.
    """
    return ad.mean(sequence_nll(logprobs, target))


def weighted_unpaired_ce(ce_x: Node | None, alpha_x, ce_y: Node | None, alpha_y,
                         weights: LossWeights, use_confidence: bool = True,
                         reduction: str = "sum") -> Node:
    """lambda_x * sum(alpha^x * CE^x) + lambda_y * sum(alpha^y * CE^y).

    ``ce_x`` / ``ce_y`` are ``(n, 1)`` per-sample cross-entropies for the
    image->pseudo-caption and caption->pseudo-image directions (either may
    be ``None``).  With ``use_confidence=False`` every alpha is taken as 1.
    ``reduction="mean"`` divides each direction by its sample count.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = ad.constant(0.0)
    for ce, alpha, lam in ((ce_x, alpha_x, weights.lambda_x), (ce_y, alpha_y, weights.lambda_y)):
        if ce is None:
            continue
        a = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
        if a.shape[0] != ce.shape[0]:
            raise ad.ShapeError(f"{a.shape[0]} confidences for {ce.shape[0]} samples")
        if (a < 0).any() or (a > 1).any():
            raise ValueError("confidence alpha must lie in [0, 1]")
        if not use_confidence:
            a = np.ones_like(a)
        term = ad.sum(ad.mul(ce, ad.constant(a)))
        if reduction == "mean":
            term = ad.scale(term, 1.0 / ce.shape[0])
        total = ad.add(total, ad.scale(term, lam))
    return total


# ---------------------------------------------------------------------------
# pair GAN

def _log_d(params, zx, zy) -> Node:
    return ad.log_sigmoid(discriminator_logit(params, zx, zy))


def _log_one_minus_d(params, zx, zy) -> Node:
    return ad.log_sigmoid(ad.neg(discriminator_logit(params, zx, zy)))


def gan_discriminator_loss(params: ParamStore, zx_real, zy_real, zx_fake_src, zy_fake_src) -> Node:
    """Negated pair-GAN objective for D.

    Real pairs are ``(zx_real, zy_real)``; fakes are
    ``(zx, T_vc(zx))`` for ``zx`` in ``zx_fake_src`` and
    ``(T_cv(zy), zy)`` for ``zy`` in ``zy_fake_src``.  Every latent and
    transformer output is detached, so only D receives gradients.
    """
    zx_real, zy_real = ad.stop_gradient(zx_real), ad.stop_gradient(zy_real)
    if zx_real.shape[0] == 0:
        raise ValueError("empty real batch")
    fx, fy = ad.stop_gradient(zx_fake_src), ad.stop_gradient(zy_fake_src)
    with ad.no_grad():
        ty = transform_feature(params, "vc", fx)
        tx = transform_feature(params, "cv", fy)
    real = ad.mean(_log_d(params, zx_real, zy_real))
    fake = ad.scale(ad.add(ad.mean(_log_one_minus_d(params, fx, ty)),
                           ad.mean(_log_one_minus_d(params, tx, fy))), 0.5)
    return ad.neg(ad.add(real, fake))


def regularizer(params: ParamStore, zx_p, zy_p, lambda_reg: float) -> Node:
    """lambda_reg * (||T_vc(zx) - zy||^2 + ||zx - T_cv(zy)||^2), averaged over the paired rows."""
    zx_p, zy_p = ad.constant(zx_p), ad.constant(zy_p)
    if zx_p.shape[0] == 0:
        raise ValueError("the regularizer needs a paired batch")
    a = ad.sq_frobenius(ad.sub(transform_feature(params, "vc", zx_p), zy_p))
    b = ad.sq_frobenius(ad.sub(zx_p, transform_feature(params, "cv", zy_p)))
    return ad.scale(ad.add(a, b), lambda_reg / zx_p.shape[0])


def gan_generator_loss(params: ParamStore, zx_p, zy_p, zx_u, zy_u, weights: LossWeights,
                       parts: bool = False):
    """Generator side of the pair GAN plus the paired regularizer.

    ``1/2 (E log(1 - D(zx, T_vc zx)) + E log(1 - D(T_cv zy, zy))) + L_reg``.
    The real-pair log D term is left out (it only trains D) and D's own
    parameters are frozen.  ``parts=True`` returns ``(adversarial, reg)``.
    """
    if zx_p is None or zy_p is None:
        raise ValueError("L_reg needs a paired batch")
    view = _frozen(params, ("D",))
    zx_u, zy_u = ad.constant(zx_u), ad.constant(zy_u)
    adv_x = ad.mean(_log_one_minus_d(view, zx_u, transform_feature(params, "vc", zx_u)))
    adv_y = ad.mean(_log_one_minus_d(view, transform_feature(params, "cv", zy_u), zy_u))
    adv = ad.scale(ad.add(adv_x, adv_y), 0.5)
    reg = regularizer(params, zx_p, zy_p, weights.lambda_reg)
    return (adv, reg) if parts else ad.add(adv, reg)


# ---------------------------------------------------------------------------
# triplet

def triplet_from_loglik(ll_pos, ll_neg_image, ll_neg_caption) -> Node:
    """mean of -[(pos - neg_img) + (pos - neg_cap)] over rows of ``(B, 1)`` log-likelihoods."""
    ll_pos, ll_neg_image, ll_neg_caption = (ad.constant(v) for v in (ll_pos, ll_neg_image, ll_neg_caption))
    diff = ad.sub(ad.add(ll_neg_image, ll_neg_caption), ad.scale(ll_pos, 2.0))
    return ad.mean(diff)


def triplet_loss(params: ParamStore, zx_p, y_p, zx_u, y_u) -> Node:
    """Triplet objective with length-normalized caption log-likelihoods.

    ``zx_p`` / ``zx_u`` are image latents of the paired batch and of random
    unpaired images; ``y_p`` / ``y_u`` the matching captions.
    """
    pos = sequence_log_likelihood(decode_teacher_forced(params, zx_p, y_p), y_p, normalize=True)
    neg_img = sequence_log_likelihood(decode_teacher_forced(params, zx_u, y_p), y_p, normalize=True)
    neg_cap = sequence_log_likelihood(decode_teacher_forced(params, zx_p, y_u), y_u, normalize=True)
    return triplet_from_loglik(pos, neg_img, neg_cap)


# ---------------------------------------------------------------------------
# CycleGAN baseline

def cycle_consistency(params: ParamStore, zx, zy) -> Node:
    """E||T_cv(T_vc(zx)) - zx||_2 + E||T_vc(T_cv(zy)) - zy||_2."""
    zx, zy = ad.constant(zx), ad.constant(zy)
    if zx.shape[0] == 0 or zy.shape[0] == 0:
        raise ValueError("cycle losses need non-empty batches")
    rx = ad.row_norm(ad.sub(transform_feature(params, "cv", transform_feature(params, "vc", zx)), zx))
    ry = ad.row_norm(ad.sub(transform_feature(params, "vc", transform_feature(params, "cv", zy)), zy))
    return ad.add(ad.mean(rx), ad.mean(ry))


def cycle_generator_loss(params: ParamStore, zx, zy, parts: bool = False):
    """L_cycle plus the translated-feature terms of the domain GAN, D_x/D_y frozen."""
    view = _frozen(params, ("Dx", "Dy"))
    zx, zy = ad.constant(zx), ad.constant(zy)
    cyc = cycle_consistency(params, zx, zy)
    adv_x = ad.mean(ad.log_sigmoid(ad.neg(domain_logit(view, "Dx", transform_feature(params, "vc", zx)))))
    adv_y = ad.mean(ad.log_sigmoid(ad.neg(domain_logit(view, "Dy", transform_feature(params, "cv", zy)))))
    adv = ad.add(adv_x, adv_y)
    return (cyc, adv) if parts else ad.add(cyc, adv)


def cycle_discriminator_loss(params: ParamStore, zx, zy) -> Node:
    """Negated domain-GAN objective for D_x and D_y; all features detached."""
    zx, zy = ad.stop_gradient(zx), ad.stop_gradient(zy)
    if zx.shape[0] == 0 or zy.shape[0] == 0:
        raise ValueError("cycle losses need non-empty batches")
    with ad.no_grad():
        tx = transform_feature(params, "vc", zx)
        ty = transform_feature(params, "cv", zy)
    obj_x = ad.add(ad.mean(ad.log_sigmoid(domain_logit(params, "Dx", zx))),
                   ad.mean(ad.log_sigmoid(ad.neg(domain_logit(params, "Dx", tx)))))
    obj_y = ad.add(ad.mean(ad.log_sigmoid(domain_logit(params, "Dy", zy))),
                   ad.mean(ad.log_sigmoid(ad.neg(domain_logit(params, "Dy", ty)))))
    return ad.neg(ad.add(obj_x, obj_y))


def cycle_losses(params: ParamStore, zx, zy) -> tuple[Node, Node]:
    """``(generator loss, discriminator loss)`` for the CycleGAN baseline."""
    return cycle_generator_loss(params, zx, zy), cycle_discriminator_loss(params, zx, zy)


# ---------------------------------------------------------------------------
# total

def total_loss(report: LossReport, weights: LossWeights) -> float:
    """Captioning terms + w_gan * generator-side GAN terms + w_triplet * triplet.

    Discriminator losses are optimized in their own step and excluded.
    """
    cap = report.cap_paired + report.cap_pseudo_x + report.cap_pseudo_y
    gan = report.gan_g + report.reg + report.cycle
    return cap + weights.w_gan * gan + weights.w_triplet * report.triplet

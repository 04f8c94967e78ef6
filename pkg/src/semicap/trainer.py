"""Alternating discriminator / generator / captioner training for every ablation variant."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import IO, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import SplitBundle
from .evaluate import MetricsReport, evaluate
from .losses import (LossReport, LossWeights, cycle_discriminator_loss, cycle_generator_loss,
                     gan_discriminator_loss, gan_generator_loss, total_loss, triplet_from_loglik,
                     weighted_unpaired_ce)
from .models import (ModelConfig, ParamStore, decode_teacher_forced, encode_caption, encode_image,
                     init_params, pad_batch, sequence_log_likelihood)
from .optim import AdamState, adam_update
from .pseudo import assign_pseudo_captions, assign_pseudo_images, encode_samples, sample_pool, write_assignments

log = logging.getLogger(__name__)

VARIANTS = ("paired-only", "cyclegan", "ver1", "ver2", "final")


@dataclass(frozen=True)
class VariantSpec:
    gan: bool = False
    cycle: bool = False
    triplet: bool = False
    pseudo: bool = False
    confidence: bool = False

    def active_losses(self) -> frozenset:
        names = {"cap_paired"}
        if self.gan:
            names |= {"gan_d", "gan_g", "reg"}
        if self.cycle:
            names |= {"cycle"}
        if self.triplet:
            names |= {"triplet"}
        if self.pseudo:
            names |= {"cap_pseudo_x", "cap_pseudo_y"}
        if self.confidence:
            names |= {"alpha"}
        return frozenset(names)


VARIANT_SPECS = {
    "paired-only": VariantSpec(),
    "cyclegan": VariantSpec(cycle=True),
    "ver1": VariantSpec(gan=True, triplet=True),
    "ver2": VariantSpec(gan=True, triplet=True, pseudo=True),
    "final": VariantSpec(gan=True, triplet=True, pseudo=True, confidence=True),
}


@dataclass
class TrainConfig:
    variant: str = "final"
    batch_size: int = 32
    iterations: int = 3000
    warmup_iters: int = 200
    pool_fraction: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 5e-4
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 500
    beam_size: int = 3

    def __post_init__(self):
        if self.variant not in VARIANT_SPECS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.batch_size < 1 or self.iterations < 0 or self.warmup_iters < 0:
            raise ValueError("batch_size must be positive; iterations and warmup_iters non-negative")
        if self.iterations and self.warmup_iters >= self.iterations and VARIANT_SPECS[self.variant].pseudo:
            raise ValueError("warmup_iters must be smaller than iterations")
        if not 0 < self.pool_fraction <= 1:
            raise ValueError("pool_fraction must lie in (0, 1]")

    @property
    def spec(self) -> VariantSpec:
        return VARIANT_SPECS[self.variant]


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, component: str, cause: Exception):
        super().__init__(f"iteration {iteration}: non-finite value in {component}: {cause}")
        self.iteration = iteration
        self.component = component


@dataclass
class TrainState:
    params: ParamStore
    gen_opt: AdamState
    disc_opt: AdamState
    iteration: int
    data_rng: np.random.Generator
    pool_rng: np.random.Generator
    neg_rng: np.random.Generator


@dataclass
class StepResult:
    report: LossReport
    assignments: list


def model_config_for(bundle: SplitBundle, **overrides) -> ModelConfig:
    lengths = [len(s.caption) for s in bundle.by_id.values() if s.caption is not None]
    base = dict(image_dim=bundle.image_dim, vocab_size=bundle.vocab_size, max_seq_len=max(lengths) + 2)
    base.update(overrides)
    return ModelConfig(**base)


def init_state(config: TrainConfig, model_config: ModelConfig) -> TrainState:
    init_seq, data_seq, pool_seq, neg_seq = np.random.SeedSequence(config.seed).spawn(4)
    params = init_params(model_config, int(init_seq.generate_state(1)[0]))
    opt = dict(lr=config.lr, b1=config.b1, b2=config.b2, eps=config.eps)
    return TrainState(params, AdamState(**opt), AdamState(**opt), 0,
                      np.random.default_rng(data_seq), np.random.default_rng(pool_seq),
                      np.random.default_rng(neg_seq))


def _update(params: ParamStore, roles, loss: ad.Node, opt: AdamState) -> None:
    subset = params.subset(roles)
    grads = ad.backward(loss, list(subset.values()))
    adam_update(subset, {k: grads[p] for k, p in subset.items()}, opt)


def _draw(rng: np.random.Generator, items: list, n: int) -> list:
    if not items:
        return []
    idx = rng.choice(len(items), size=min(n, len(items)), replace=False)
    return [items[i] for i in idx]


def _images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def train_step(state: TrainState, config: TrainConfig, bundle: SplitBundle, paired: list,
               unpaired_images: list, unpaired_captions: list) -> StepResult:
    """One alternating iteration; see the module README for the sub-step order."""
    spec, w, params = config.spec, config.weights, state.params
    report = LossReport()
    it = state.iteration
    component = "setup"
    assignments: list = []
    try:
        xp, yp = _images(paired), [s.caption for s in paired]
        adversarial = (spec.gan or spec.cycle) and unpaired_images and unpaired_captions
        if adversarial:
            xu, yu = _images(unpaired_images), [s.caption for s in unpaired_captions]
            with ad.no_grad():
                zx_p0 = encode_image(params, xp).value
                zy_p0 = encode_caption(params, yp).value
                zx_u0 = encode_image(params, xu).value
                zy_u0 = encode_caption(params, yu).value
            zx_all0 = np.concatenate([zx_p0, zx_u0])
            zy_all0 = np.concatenate([zy_p0, zy_u0])

            # (1) discriminator
            if spec.gan:
                component = "gan_d"
                loss_d = gan_discriminator_loss(params, zx_p0, zy_p0, zx_all0, zy_all0)
                _update(params, ("D",), loss_d, state.disc_opt)
                report.gan_d = loss_d.item()
            else:
                component = "cycle_d"
                loss_d = cycle_discriminator_loss(params, zx_all0, zy_all0)
                _update(params, ("Dx", "Dy"), loss_d, state.disc_opt)
                report.gan_d = loss_d.item()

            # (2) generator side of the adversarial game
            zx_p, zy_p = encode_image(params, xp), encode_caption(params, yp)
            zx_u, zy_u = encode_image(params, xu), encode_caption(params, yu)
            zx_all, zy_all = ad.concat_rows(zx_p, zx_u), ad.concat_rows(zy_p, zy_u)
            if spec.gan:
                component = "gan_g"
                adv, reg = gan_generator_loss(params, zx_p, zy_p, zx_all, zy_all, w, parts=True)
                report.gan_g, report.reg = adv.item(), reg.item()
                gen_loss = ad.scale(ad.add(adv, reg), w.w_gan)
            else:
                component = "cycle"
                gen = cycle_generator_loss(params, zx_all, zy_all)
                report.cycle = gen.item()
                gen_loss = ad.scale(gen, w.w_gan)
            _update(params, ("F", "G", "Tvc", "Tcv"), gen_loss, state.gen_opt)

        # (3) pseudo-labels
        pseudo_x, pseudo_y = [], []
        if spec.pseudo and it >= config.warmup_iters and unpaired_images and unpaired_captions:
            component = "pseudo_labels"
            cap_pool = sample_pool(bundle.unpaired_captions, config.pool_fraction, state.pool_rng,
                                   params, "captions")
            img_pool = sample_pool(bundle.unpaired_images, config.pool_fraction, state.pool_rng,
                                   params, "images")
            zx_anchor = encode_samples(params, unpaired_images, "images")
            zy_anchor = encode_samples(params, unpaired_captions, "captions")
            pseudo_x = assign_pseudo_captions(params, zx_anchor, [s.id for s in unpaired_images], cap_pool)
            pseudo_y = assign_pseudo_images(params, zy_anchor, [s.id for s in unpaired_captions], img_pool)
            assignments = pseudo_x + pseudo_y

        # (4) captioner
        component = "captioner"
        images, captions, spans = [xp], list(yp), {"paired": (0, len(paired))}

        def add_rows(name, imgs, caps):
            start = len(captions)
            images.append(imgs)
            captions.extend(caps)
            spans[name] = (start, len(captions))

        if pseudo_x:
            add_rows("pseudo_x", _images(unpaired_images),
                     [bundle.by_id[p.retrieved_id].caption for p in pseudo_x])
            add_rows("pseudo_y", np.stack([bundle.by_id[p.retrieved_id].image for p in pseudo_y]),
                     [s.caption for s in unpaired_captions])
        if spec.triplet and unpaired_images and unpaired_captions:
            neg_x = _draw(state.neg_rng, bundle.unpaired_images, len(paired))
            neg_y = _draw(state.neg_rng, bundle.unpaired_captions, len(paired))
            if len(neg_x) == len(paired) and len(neg_y) == len(paired):
                add_rows("neg_image", _images(neg_x), yp)
                add_rows("neg_caption", xp, [s.caption for s in neg_y])

        ids, lengths = pad_batch(captions)
        zx = encode_image(params, np.concatenate(images))
        ll = sequence_log_likelihood(decode_teacher_forced(params, zx, (ids, lengths)), (ids, lengths))

        def rows(name, column=ll):
            a, b = spans[name]
            return ad.slice_rows(column, a, b)

        cap_paired = ad.neg(ad.mean(rows("paired")))
        objective = cap_paired
        report.cap_paired = cap_paired.item()
        if pseudo_x:
            alpha_x = [p.alpha for p in pseudo_x]
            alpha_y = [p.alpha for p in pseudo_y]
            use_conf = spec.confidence
            ce_x, ce_y = ad.neg(rows("pseudo_x")), ad.neg(rows("pseudo_y"))
            px = weighted_unpaired_ce(ce_x, alpha_x, None, None, w, use_conf, reduction="mean")
            py = weighted_unpaired_ce(None, None, ce_y, alpha_y, w, use_conf, reduction="mean")
            report.cap_pseudo_x, report.cap_pseudo_y = px.item(), py.item()
            objective = ad.add(objective, ad.add(px, py))
        if "neg_image" in spans:
            norm = ad.mul(ll, ad.constant(1.0 / np.maximum(lengths - 1, 1)[:, None]))
            trip = triplet_from_loglik(rows("paired", norm), rows("neg_image", norm), rows("neg_caption", norm))
            report.triplet = trip.item()
            objective = ad.add(objective, ad.scale(trip, w.w_triplet))
        _update(params, ("F", "H"), objective, state.gen_opt)
    except NumericError as e:
        raise TrainingAborted(it, component, e) from e

    report.total = total_loss(report, w)
    state.iteration += 1
    return StepResult(report, assignments)


@dataclass
class TrainResult:
    params: ParamStore
    history: list
    metrics: Optional[MetricsReport]


def history_columns() -> list:
    return ["iteration"] + LossReport.columns() + MetricsReport.columns()


def train(config: TrainConfig, bundle: SplitBundle, model_config: Optional[ModelConfig] = None,
          assignment_log: Optional[IO[str]] = None) -> TrainResult:
    """Run ``config.iterations`` steps, evaluating on ``bundle.test`` every ``eval_every``.

    History rows are dicts keyed by :func:`history_columns`; metric columns
    are ``None`` except at evaluation points.  Pseudo-label precision at an
    evaluation point covers the assignments made since the previous one.
    """
    model_config = model_config or model_config_for(bundle)
    state = init_state(config, model_config)
    history: list = []
    metrics = None
    if not bundle.paired:
        raise ValueError("training needs at least one paired sample")
    concept_of = {i: s.concept_id for i, s in bundle.by_id.items()} if bundle.has_concepts else None
    window: list = []
    for it in range(config.iterations):
        paired = _draw(state.data_rng, bundle.paired, config.batch_size)
        uimg = _draw(state.data_rng, bundle.unpaired_images, config.batch_size)
        ucap = _draw(state.data_rng, bundle.unpaired_captions, config.batch_size)
        step = train_step(state, config, bundle, paired, uimg, ucap)
        if step.assignments:
            window.extend({"anchor_id": p.anchor_id, "retrieved_id": p.retrieved_id,
                           "direction": p.direction} for p in step.assignments)
            if assignment_log is not None:
                write_assignments(assignment_log, it, step.assignments)
        row = {"iteration": it, **dict(zip(LossReport.columns(), step.report.values()))}
        row.update({k: None for k in MetricsReport.columns()})
        done = it + 1
        if bundle.test and config.eval_every and (done % config.eval_every == 0 or done == config.iterations):
            metrics = evaluate(state.params, bundle.test, config.beam_size, window, concept_of)
            row.update(vars(metrics))
            window = []
            log.info("iter %d %s bleu4=%.4f f1=%.4f", done, config.variant, metrics.bleu4, metrics.token_f1)
        history.append(row)
    return TrainResult(state.params, history, metrics)


def write_history(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(history_columns())
        for row in history:
            writer.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in history_columns()])

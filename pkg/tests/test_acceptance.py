"""End-to-end acceptance suite; each test records one PASS/FAIL line.

The ablation, pseudo-label and paired-fraction checks train on the full
default benchmark and share one memoized set of runs, so the module takes
a long time (roughly 45 minutes on one CPU core).
"""

import math
import statistics
import time

import numpy as np
import pytest

from semicap import autodiff as ad
from semicap.cli import main as cli_main
from semicap.data import BOS, EOS, GenConfig, generate, split_scarcely_paired
from semicap.evaluate import bleu
from semicap.losses import (LossReport, LossWeights, caption_ce, cycle_consistency, cycle_generator_loss,
                            cycle_losses, gan_discriminator_loss, gan_generator_loss, regularizer, sequence_nll,
                            total_loss, triplet_from_loglik, triplet_loss, weighted_unpaired_ce)
from semicap.models import (ModelConfig, decode_teacher_forced, encode_caption, encode_image, init_params,
                            pad_batch, sequence_log_likelihood)
from semicap.optim import finite_diff_check
from semicap.pseudo import assign_pseudo_caption, assign_pseudo_image, encode_samples, sample_pool
from semicap.trainer import TrainConfig, model_config_for, train

SEEDS = (0, 1, 2)
FRACTIONS = (0.01, 0.05, 0.2, 0.6)
K = 40

# ---------------------------------------------------------------------------
# 1. gradient correctness

TINY = ModelConfig(image_dim=3, latent_dim=2, vocab_size=6, embed_dim=2, lstm_hidden=2, disc_hidden=3,
                   max_seq_len=6)
# pre-padded (ids, lengths) batches, so each probe skips re-padding
CAPS = pad_batch([[BOS, 3, 4, EOS], [BOS, 5, EOS], [BOS, 4, 5, EOS]])
NEG_CAPS = pad_batch([[BOS, 5, 3, EOS], [BOS, 4, EOS], [BOS, 3, EOS]])
GEN = ("F", "G", "Tvc", "Tcv")


def _grad_cases(seed):
    params = init_params(TINY, seed)
    rng = np.random.default_rng(100 + seed)
    # zero biases and dead relus at init make degenerate latents; jitter into general position
    for p in params.flat().values():
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    xp, xu = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    w = LossWeights()
    alpha_x, alpha_y = rng.uniform(0.1, 1.0, 3), rng.uniform(0.1, 1.0, 3)
    # discriminator losses see frozen features, so encode those once
    frozen = [encode_image(params, xp).value, encode_caption(params, CAPS).value,
              encode_image(params, xu).value, encode_caption(params, NEG_CAPS).value]

    def latents():
        return (encode_image(params, xp), encode_caption(params, CAPS),
                encode_image(params, xu), encode_caption(params, NEG_CAPS))

    def cap():
        return caption_ce(decode_teacher_forced(params, encode_image(params, xp), CAPS), CAPS)

    def gen():
        return gan_generator_loss(params, *latents(), w)

    def disc():
        return gan_discriminator_loss(params, *frozen)

    def trip():
        return triplet_loss(params, encode_image(params, xp), CAPS, encode_image(params, xu), NEG_CAPS)

    def cyc_gen():
        return cycle_losses(params, encode_image(params, xu), encode_caption(params, NEG_CAPS))[0]

    def cyc_disc():
        return cycle_losses(params, frozen[2], frozen[3])[1]

    def total():
        zx_p, zy_p, zx_u, zy_u = latents()
        # three decodes cover the paired CE, both pseudo-label terms and the triplet
        dec_pos = decode_teacher_forced(params, zx_p, CAPS)
        dec_img = decode_teacher_forced(params, zx_u, CAPS)
        dec_cap = decode_teacher_forced(params, zx_p, NEG_CAPS)
        pseudo = LossWeights()
        px = weighted_unpaired_ce(sequence_nll(dec_img, CAPS), alpha_x, None, None, pseudo)
        py = weighted_unpaired_ce(None, None, sequence_nll(dec_cap, NEG_CAPS), alpha_y, pseudo)
        ll = [sequence_log_likelihood(d, c, normalize=True)
              for d, c in ((dec_pos, CAPS), (dec_img, CAPS), (dec_cap, NEG_CAPS))]
        adv, reg = gan_generator_loss(params, zx_p, zy_p, zx_u, zy_u, w, parts=True)
        report = LossReport(cap_paired=caption_ce(dec_pos, CAPS), cap_pseudo_x=px, cap_pseudo_y=py, gan_g=adv,
                            reg=reg, triplet=triplet_from_loglik(*ll),
                            cycle=cycle_generator_loss(params, zx_u, zy_u))
        return total_loss(report, w)

    sub = lambda roles: list(params.subset(roles).values())
    return {
        "caption_ce": (cap, sub(("F", "H"))),
        "gan_generator_loss": (gen, sub(GEN)),
        "gan_discriminator_loss": (disc, sub(("D",))),
        "triplet_loss": (trip, sub(("F", "H"))),
        "cycle_losses.gen": (cyc_gen, sub(GEN)),
        "cycle_losses.disc": (cyc_disc, sub(("Dx", "Dy"))),
        "total_loss": (total, sub(GEN + ("H",))),
    }


def test_criterion_1_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in range(5):
        for name, (f, ps) in _grad_cases(seed).items():
            # the O(eps^4) stencil keeps round-off well below slopes near 1e-8
            worst[name] = max(worst.get(name, 0.0), finite_diff_check(f, ps, eps=2e-3))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    criterion(1, "finite-difference gradients < 1e-4, seeds 0-4, < 30 s", ok, detail)


# ---------------------------------------------------------------------------
# 2. analytic loss oracles

def test_criterion_2_analytic_oracles(criterion):
    params = init_params(TINY, 0)
    rng = np.random.default_rng(0)
    for p in params["D"].values():
        p.value[...] = 0.0
    d = TINY.latent_dim
    z = [rng.standard_normal((n, d)) for n in (4, 4, 3, 2)]
    d_err = abs(gan_discriminator_loss(params, *z).item() - 2 * math.log(2))

    for role in ("Tvc", "Tcv"):
        for i in range(1, 5):
            params[role][f"W{i}"].value[...] = np.eye(d)
            params[role][f"b{i}"].value[...] = 0.0
    zx = np.abs(rng.standard_normal((4, d)))
    reg = regularizer(params, zx, zx, 0.1).item()
    cyc = cycle_consistency(params, zx, zx).item()

    for p in params["H"].values():
        p.value[...] = 0.0
    cap = [BOS, 3, 4, 5, EOS]
    ce = caption_ce(decode_teacher_forced(params, rng.standard_normal((1, d)), cap), cap).item()
    ce_err = abs(ce - 4 * math.log(TINY.vocab_size))

    ok = d_err <= 1e-12 and reg == 0.0 and cyc == 0.0 and ce_err <= 1e-9
    detail = f"|D-2ln2|={d_err:.1e}, L_reg={reg}, L_cycle={cyc}, |CE-4ln6|={ce_err:.1e}"
    criterion(2, "analytic oracles (2 ln 2, zero L_reg / L_cycle, steps*ln V)", ok, detail)


# ---------------------------------------------------------------------------
# 3. retrieval equivalence

def _np_discriminator(params, zx, zy):
    # independent forward: explicit concatenation, one candidate row per input row
    D = params["D"]
    h = np.concatenate([zx, zy], axis=1)
    for i in (1, 2):
        h = np.maximum(h @ D[f"W{i}"].value + D[f"b{i}"].value, 0.0)
    logit = h @ D["W3"].value + D["b3"].value
    return 1.0 / (1.0 + np.exp(-logit[:, 0]))


def _scan(scores, ids):
    best, best_id = -np.inf, None
    for s, i in sorted(zip(scores, ids), key=lambda t: t[1]):
        if s > best:
            best, best_id = s, i
    return best_id


def test_criterion_3_retrieval_equivalence(criterion):
    start = time.perf_counter()
    bundle = split_scarcely_paired(generate(GenConfig(seed=0)), 0.01, 0.1, seed=0)
    params = init_params(model_config_for(bundle), 11)
    rng = np.random.default_rng(3)
    for p in params["D"].values():
        p.value += 0.3 * rng.standard_normal(p.value.shape)
    cap_pool = sample_pool(bundle.unpaired_captions, 1.0, 0, params, "captions")
    img_pool = sample_pool(bundle.unpaired_images, 1.0, 0, params, "images")
    cap_lat = np.concatenate([encode_caption(params, [s.caption]).value for s in bundle.unpaired_captions])
    img_lat = np.concatenate([encode_image(params, s.image[None]).value for s in bundle.unpaired_images])
    cap_ids = [s.id for s in bundle.unpaired_captions]
    img_ids = [s.id for s in bundle.unpaired_images]

    mismatches = 0
    for i in rng.choice(len(bundle.unpaired_images), 100, replace=False):
        x = bundle.unpaired_images[i]
        zx = np.repeat(encode_samples(params, [x], "images"), len(cap_ids), axis=0)
        mismatches += assign_pseudo_caption(x, cap_pool, params).retrieved_id != _scan(
            _np_discriminator(params, zx, cap_lat), cap_ids)
    for i in rng.choice(len(bundle.unpaired_captions), 100, replace=False):
        y = bundle.unpaired_captions[i]
        zy = np.repeat(encode_samples(params, [y], "captions"), len(img_ids), axis=0)
        mismatches += assign_pseudo_image(y, img_pool, params).retrieved_id != _scan(
            _np_discriminator(params, img_lat, zy), img_ids)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    criterion(3, "pool fraction 1.0 retrieval equals brute-force scan, 100 anchors per direction, < 10 s",
              ok, f"{mismatches} mismatches; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4-6. full training runs on the default benchmark

class Runs:
    """Memoized (variant, seed, paired_fraction) -> final metrics on the default benchmark."""

    def __init__(self):
        self._cache = {}
        self._data = {}

    def __call__(self, variant, seed, fraction=0.01):
        key = (variant, seed, fraction)
        if key not in self._cache:
            if seed not in self._data:
                self._data[seed] = generate(GenConfig(seed=seed))
            bundle = split_scarcely_paired(self._data[seed], fraction, 0.1, seed=seed)
            start = time.perf_counter()
            result = train(TrainConfig(variant=variant, seed=seed), bundle)
            self._cache[key] = result.metrics
            print(f"run {variant} seed={seed} fraction={fraction}: bleu4={result.metrics.bleu4:.4f} "
                  f"({time.perf_counter() - start:.0f}s)")
        return self._cache[key]

    def median_bleu4(self, variant, fraction=0.01):
        return statistics.median(self(variant, s, fraction).bleu4 for s in SEEDS)


@pytest.fixture(scope="module")
def runs():
    return Runs()


def test_criterion_4_ablation_ordering(criterion, runs):
    med = {v: runs.median_bleu4(v) for v in ("paired-only", "cyclegan", "ver1", "ver2", "final")}
    ok = med["final"] > med["ver2"] > med["ver1"] > med["paired-only"] and med["final"] > med["cyclegan"]
    detail = ", ".join(f"{k}={v:.4f}" for k, v in med.items())
    criterion(4, "median BLEU-4 final > ver2 > ver1 > paired-only and final > cyclegan", ok, detail)


def test_criterion_5_pseudo_label_quality(criterion, runs):
    bar = 5 / K
    prec = [(runs("final", s).pseudo_precision_x, runs("final", s).pseudo_precision_y) for s in SEEDS]
    ok = all(px is not None and py is not None and px >= bar and py >= bar for px, py in prec)
    detail = "; ".join(f"seed {s}: x={px:.3f} y={py:.3f}" for s, (px, py) in zip(SEEDS, prec))
    criterion(5, f"final pseudo-label precision >= 5/K = {bar:.3f} both directions, seeds 0-2", ok, detail)


def test_criterion_6_paired_fraction_monotonicity(criterion, runs):
    curves = {v: [runs.median_bleu4(v, f) for f in FRACTIONS] for v in ("paired-only", "final")}
    monotone = all(all(b >= a for a, b in zip(c, c[1:])) for c in curves.values())
    dominates = all(f >= p for f, p in zip(curves["final"], curves["paired-only"]))
    detail = "; ".join(f"{v}: " + " ".join(f"{x:.4f}" for x in c) for v, c in curves.items())
    criterion(6, "BLEU-4 non-decreasing in paired fraction and final >= paired-only", monotone and dominates,
              detail + f" (fractions {FRACTIONS})")


# ---------------------------------------------------------------------------
# 7. determinism

def test_criterion_7_determinism(criterion, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("variant = final\niterations = 300\nwarmup_iters = 100\neval_every = 100\n")
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [cli_main(["train", "--config", str(cfg), "--out", str(d), "--seed", "5"]) for d in (a, b)]
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    criterion(7, "identical config + seed give a bit-identical metrics CSV", codes == [0, 0] and same,
              f"exit codes {codes}, {len((a / 'metrics.csv').read_text().splitlines())} CSV lines")


# ---------------------------------------------------------------------------
# 8. BLEU oracle

BLEU_FIXTURES = [
    # candidates, references, max_n, hand-computed value
    ([[3, 4, 5, 6]], [[[3, 4, 5, 6]]], 4, 1.0),
    ([[3, 4, 5]], [[[3, 4, 6]]], 1, 2 / 3),
    ([[3, 4]], [[[4, 3]]], 2, 0.0),
    ([[3, 4]], [[[3, 4, 5, 6]]], 2, math.exp(1 - 4 / 2)),
    ([[3, 3, 3, 3]], [[[3, 4, 5, 6]]], 1, 1 / 4),
    ([[3, 4, 5], [6, 7, 8]], [[[3, 4, 5]], [[6, 9, 8]]], 2, math.sqrt((5 / 6) * (2 / 4))),
    ([[3, 4]], [[[3, 4, 5], [3, 4, 5, 6, 7]]], 2, math.exp(1 - 3 / 2)),
]


def test_criterion_8_bleu_oracle(criterion):
    errs = [abs(bleu(c, r, n) - v) for c, r, n, v in BLEU_FIXTURES]
    identity = bleu([[3, 4, 5, 6, 7]], [[[3, 4, 5, 6, 7]]], 4)
    ok = max(errs) <= 1e-9 and identity == 1.0 and len(BLEU_FIXTURES) >= 5
    criterion(8, "BLEU matches hand-computed fixtures to 1e-9, identity = 1.0", ok,
              f"{len(BLEU_FIXTURES)} fixtures, max error {max(errs):.1e}, identity {identity}")

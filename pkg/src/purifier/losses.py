"""Training losses for the purifier generator and its discriminator.

All functions are pure: tensors in, scalar tensors out. The "ours" modes
anchor the purified adversarial image to the purified clean image (and the
discriminator never sees raw inputs); the "traditional" modes anchor
everything to the raw clean image, which is what the ablation settings
exercise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from ._util import mean_l1
from .errors import NonFiniteLossError, UnsupportedTaskError, ValidationError
from .features import ClassCenters, ClassFeatureSet

PIXEL_MODES = ("ours", "traditional")
FEATURE_MODES = ("ours", "abla_feature_I")
CLASS_MODES = ("ours", "abla_feature_II")


@dataclass
class LossWeights:
    """Loss weights and the inter-class margin.

    ``inter_mode="hinge"`` clamps each pairwise inter-class term at zero so
    the objective is bounded below; ``"literal"`` keeps the raw margin term.
    """

    lambda1: float = 0.1
    lambda2: float = 1.0
    lambda3: float = 0.005
    lambda4: float = 50.0
    margin: float = 1.0
    inter_mode: str = "hinge"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "margin"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.inter_mode not in ("hinge", "literal"):
            raise ValidationError(f"inter_mode must be 'hinge' or 'literal', got {self.inter_mode!r}")


@dataclass
class LossParts:
    """Every scalar term feeding the generator/discriminator objectives."""

    recon: torch.Tensor | float = 0.0
    perceptual: torch.Tensor | float = 0.0
    feature_match: torch.Tensor | float = 0.0
    gan_g: torch.Tensor | float = 0.0
    gan_d: torch.Tensor | float = 0.0
    task: torch.Tensor | float = 0.0
    feature_recon: torch.Tensor | float = 0.0
    center_align: torch.Tensor | float = 0.0
    inter_class: torch.Tensor | float = 0.0
    intra_class: torch.Tensor | float = 0.0

    def to_dict(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = float(value.detach()) if torch.is_tensor(value) else float(value)
        return out


def pixel_losses(purified_clean, clean, purified_adv, extractor, mode: str = "ours"):
    """Reconstruction + perceptual loss.

    Returns (recon, perceptual). The first pairing is always purified-clean
    vs clean; the second anchors the purified adversarial image to the
    purified clean image ("ours") or to the raw clean image ("traditional").
    The perceptual term repeats both pairings in the fixed extractor's
    feature spaces, summed over stages.
    """
    if mode not in PIXEL_MODES:
        raise ValidationError(f"pixel mode must be one of {PIXEL_MODES}, got {mode!r}")
    if purified_clean.shape != clean.shape or purified_adv.shape != clean.shape:
        raise ValidationError("pixel_losses requires equal shapes for all three batches")
    anchor = purified_clean if mode == "ours" else clean
    recon = mean_l1(purified_clean, clean) + mean_l1(purified_adv, anchor)

    feats_pc = extractor(purified_clean)
    feats_c = extractor(clean)
    feats_pa = extractor(purified_adv)
    feats_anchor = feats_pc if mode == "ours" else feats_c
    perceptual = sum(mean_l1(a, b) for a, b in zip(feats_pc, feats_c))
    perceptual = perceptual + sum(mean_l1(a, b) for a, b in zip(feats_pa, feats_anchor))
    return recon, perceptual


def gan_losses(disc, purified_clean, purified_adv, mode: str = "ours", clean=None):
    """Least-squares GAN losses plus the discriminator feature-matching term.

    "ours": the purified clean batch plays real (label 1) and the purified
    adversarial batch plays fake (label 0); feature matching ties the two
    purified batches together. "traditional": the raw clean batch is real,
    both purified batches are fake, and feature matching anchors both to the
    raw clean taps. Returns (gan_d, gan_g, feature_match); score maps carry
    no sigmoid. Sums run over scales and tap layers.
    """
    if mode not in PIXEL_MODES:
        raise ValidationError(f"gan mode must be one of {PIXEL_MODES}, got {mode!r}")
    scores_pc, taps_pc = disc(purified_clean)
    scores_pa, taps_pa = disc(purified_adv)

    if mode == "ours":
        gan_d = sum(((s - 1.0) ** 2).mean() for s in scores_pc) + sum((s**2).mean() for s in scores_pa)
        gan_g = sum(((s - 1.0) ** 2).mean() for s in scores_pa)
        feature_match = sum(mean_l1(a, b) for a, b in zip(taps_pc, taps_pa))
        return gan_d, gan_g, feature_match

    if clean is None:
        raise ValidationError("traditional gan mode requires the raw clean batch")
    scores_c, taps_c = disc(clean)
    gan_d = (
        sum(((s - 1.0) ** 2).mean() for s in scores_c)
        + sum((s**2).mean() for s in scores_pc)
        + sum((s**2).mean() for s in scores_pa)
    )
    gan_g = sum(((s - 1.0) ** 2).mean() for s in scores_pc) + sum(((s - 1.0) ** 2).mean() for s in scores_pa)
    feature_match = sum(mean_l1(a, c) for a, c in zip(taps_pa, taps_c))
    feature_match = feature_match + sum(mean_l1(b, c) for b, c in zip(taps_pc, taps_c))
    return gan_d, gan_g, feature_match


def task_loss(outputs: torch.Tensor, labels: torch.Tensor, task_kind: str,
              ignore_label: int = 255) -> torch.Tensor:
    """The target model's own training criterion (cross-entropy for
    classification and segmentation)."""
    if task_kind in ("classification", "segmentation"):
        return F.cross_entropy(outputs, labels.long(), ignore_index=ignore_label)
    raise UnsupportedTaskError(f"no task loss implemented for {task_kind!r}")


def feature_losses(target, purified_clean, purified_adv, clean, labels, mode: str = "ours"):
    """Task loss plus feature-space reconstruction in the target model.

    Returns (task, feature_recon). "ours" anchors both purified feature sets
    to the raw clean features; "abla_feature_I" anchors the adversarial
    features to the purified clean features instead.
    """
    from .models import target_forward  # local import to avoid a cycle

    outputs_pc, feats_pc = target_forward(target, purified_clean)
    outputs_pa, feats_pa = target_forward(target, purified_adv)
    with torch.no_grad():
        _, feats_clean = target_forward(target, clean)
    return feature_losses_from_outputs(
        outputs_pc, outputs_pa, feats_pc, feats_pa, feats_clean, labels, target.task_kind, mode
    )


def feature_losses_from_outputs(outputs_pc, outputs_pa, feats_pc, feats_pa, feats_clean,
                                labels, task_kind, mode: str = "ours"):
    if mode not in FEATURE_MODES:
        raise ValidationError(f"feature mode must be one of {FEATURE_MODES}, got {mode!r}")
    task = task_loss(outputs_pc, labels, task_kind) + task_loss(outputs_pa, labels, task_kind)
    anchor = feats_clean if mode == "ours" else feats_pc
    feature_recon = mean_l1(feats_pc, feats_clean) + mean_l1(feats_pa, anchor)
    return task, feature_recon


def class_aware_losses(clean_centers: ClassCenters, adv_features: ClassFeatureSet,
                       adv_centers: ClassCenters, weights: LossWeights, mode: str = "ours"):
    """Center alignment, intra-class compactness and inter-class separation.

    Only classes present in both the clean-center map and the adversarial set
    participate. ``mode`` records whose features produced ``clean_centers``
    (raw clean for "ours", purified clean for "abla_feature_II"); the math is
    identical. With zero overlapping classes all terms are zero and a warning
    is emitted rather than returning NaN.

    Returns (center_align, intra_class, inter_class, class_total) where
    class_total = lambda1*align + lambda2*inter + lambda3*intra.
    """
    if mode not in CLASS_MODES:
        raise ValidationError(f"class-aware mode must be one of {CLASS_MODES}, got {mode!r}")
    common = sorted(set(clean_centers.centers) & set(adv_centers.centers) & set(adv_features.per_class))
    if not common:
        warnings.warn("no overlapping classes between clean and adversarial sets; "
                      "class-aware losses are zero for this batch")
        zero = torch.zeros(())
        return zero, zero.clone(), zero.clone(), zero.clone()

    align = sum(mean_l1(clean_centers.centers[k], adv_centers.centers[k]) for k in common)
    intra = sum(
        mean_l1(adv_features.per_class[k], adv_centers.centers[k].unsqueeze(0).expand_as(adv_features.per_class[k]))
        for k in common
    )
    inter = torch.zeros(())
    for k in common:
        for i in common:
            if i == k:
                continue
            term = weights.margin - mean_l1(adv_centers.centers[k], adv_centers.centers[i])
            if weights.inter_mode == "hinge":
                term = term.clamp_min(0.0)
            inter = inter + term
    class_total = weights.lambda1 * align + weights.lambda2 * inter + weights.lambda3 * intra
    return align, intra, inter, class_total


def total_generator_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    """Weighted generator objective.

    lambda4 scales the six pixel/feature terms (recon, perceptual, feature
    match, generator GAN, task, feature recon); the three class-aware terms
    keep their own weights. Raises if any part is non-finite, naming it.
    """
    for f in fields(parts):
        value = getattr(parts, f.name)
        scalar = float(value) if not torch.is_tensor(value) else value
        if torch.is_tensor(scalar):
            finite = bool(torch.isfinite(scalar).all())
        else:
            finite = math.isfinite(scalar)
        if not finite:
            raise NonFiniteLossError(f"loss term {f.name!r} is non-finite: {value}")
    grouped = (
        parts.recon + parts.perceptual + parts.feature_match + parts.gan_g
        + parts.task + parts.feature_recon
    )
    return (
        weights.lambda4 * grouped
        + weights.lambda1 * parts.center_align
        + weights.lambda2 * parts.inter_class
        + weights.lambda3 * parts.intra_class
    )

"""Defense evaluation protocols: transfer attacks, targeted attacks,
generator model-transfer, BPDA-aware attackers, plus the supporting metrics
(mIoU, paired t-test) and a stable JSON/CSV report format."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import stats
from torch import nn

from ._util import derive_seed
from .attacks import AttackSpec, generate_adversarial
from .data import DatasetSpec, load_batches
from .diagnostics import psnr
from .errors import ConfigurationError, ValidationError
from .models import TargetModel, freeze
from .training import load_generator

REPORT_SCHEMA = "report-v1"
BALL_TOLERANCE = 1e-6


class IdentityDefense(nn.Module):
    """Pass-through defense; the no-op baseline and the degenerate surrogate."""

    def forward(self, x):
        return x


class DefendedModel(nn.Module):
    """target(defense(x)) composed as a single differentiable model, so the
    attack bench can treat a defended pipeline like any other model."""

    def __init__(self, defense: nn.Module, target: TargetModel):
        super().__init__()
        self.defense = defense
        self.target = target
        self.task_kind = target.task_kind
        self.num_classes = target.num_classes

    @property
    def model_id(self) -> str:
        return f"{type(self.defense).__name__}->{self.target.model_id}"

    def forward(self, x):
        return self.target(self.defense(x))


class ResizedModel(nn.Module):
    """Adapts a model trained at a different resolution by resizing its
    inputs (differentiably), the 'resize' mismatch policy."""

    def __init__(self, model, resolution: int):
        super().__init__()
        self.model = model
        self.resolution = resolution
        self.task_kind = getattr(model, "task_kind", "classification")
        self.num_classes = getattr(model, "num_classes", None)

    @property
    def model_id(self) -> str:
        return f"resize{self.resolution}->{self.model.model_id}"

    def forward(self, x):
        resized = torch.nn.functional.interpolate(
            x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return self.model(resized)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, module):
        with torch.no_grad():
            return module(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


class StraightThroughDefense(nn.Module):
    """BPDA wrapper: run the wrapped defense forward but treat it as the
    identity in the backward pass."""

    def __init__(self, defense: nn.Module):
        super().__init__()
        self.wrapped = defense

    def forward(self, x):
        return _StraightThrough.apply(x, self.wrapped)


# ---------------------------------------------------------------------------
# Report structures
# ---------------------------------------------------------------------------


@dataclass
class AttackOutcome:
    spec: dict
    undefended_accuracy: float
    defended_accuracy: float
    psnr_purified_adv: float
    ball_violations: int = 0


@dataclass
class EvalReport:
    target_model: str
    substitute_model: str | None
    defense: str | None
    seed: int
    clean_undefended: float
    clean_defended: float
    attacks: list[AttackOutcome] = field(default_factory=list)
    transfer: bool = False
    bpda: bool = False
    notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "target_model": self.target_model,
            "substitute_model": self.substitute_model,
            "defense": self.defense,
            "seed": self.seed,
            "clean": {"undefended": self.clean_undefended, "defended": self.clean_defended},
            "attacks": [
                {
                    "spec": o.spec,
                    "undefended_accuracy": o.undefended_accuracy,
                    "defended_accuracy": o.defended_accuracy,
                    "psnr_purified_adv": o.psnr_purified_adv,
                    "ball_violations": o.ball_violations,
                }
                for o in self.attacks
            ],
            "transfer": self.transfer,
            "bpda": self.bpda,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        """Flat view: one row per attack plus a clean row."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["attack", "epsilon", "steps", "undefended", "defended", "psnr"])
        writer.writerow(["clean", 0.0, 0, self.clean_undefended, self.clean_defended, ""])
        for o in self.attacks:
            writer.writerow([
                o.spec["family"], o.spec["epsilon"], o.spec["steps"],
                o.undefended_accuracy, o.defended_accuracy, o.psnr_purified_adv,
            ])
        return buf.getvalue()

    def total_ball_violations(self) -> int:
        return sum(o.ball_violations for o in self.attacks)


# ---------------------------------------------------------------------------
# Core evaluation
# ---------------------------------------------------------------------------


def _apply_defense(defense: nn.Module | None, x: torch.Tensor) -> torch.Tensor:
    if defense is None:
        return x
    with torch.no_grad():
        return defense(x)


def _predict(model, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(x).argmax(dim=1)


def _check_ball(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> int:
    """Count samples breaking the eps-ball or pixel-domain invariants."""
    gap = (x_adv - x).abs().flatten(1).amax(dim=1)
    bad = (gap > epsilon + BALL_TOLERANCE) | (x_adv.flatten(1).amin(dim=1) < 0) \
        | (x_adv.flatten(1).amax(dim=1) > 1)
    return int(bad.sum())


def _resolve_source(source, dataset: DatasetSpec, resize_policy: str):
    """Handle substitute/target resolution mismatch per the configured policy."""
    expected = getattr(source, "resolution", None)
    if expected is None or expected == dataset.resolution:
        return source
    if resize_policy == "resize":
        return ResizedModel(source, expected)
    raise ConfigurationError(
        f"substitute expects {expected}px inputs but dataset provides {dataset.resolution}px; "
        "set resize_policy='resize' or pick a matching substitute")


def _top_runner_up_targets(model, x: torch.Tensor, y: torch.Tensor, count: int = 9) -> torch.Tensor:
    """Per-sample classes with the highest scores at the original point,
    excluding the true label; shape (count, B)."""
    with torch.no_grad():
        scores = model(x)
    scores = scores.scatter(1, y.unsqueeze(1), float("-inf"))
    return scores.topk(min(count, scores.shape[1] - 1), dim=1).indices.t()


def _targeted_outcome(source, target, defense, x, y, spec: AttackSpec, seed: int):
    """Targeted evaluation: success means no runner-up target is reached."""
    targets = _top_runner_up_targets(source, x, y)
    undef_hit = torch.zeros(x.shape[0], dtype=torch.bool)
    def_hit = torch.zeros(x.shape[0], dtype=torch.bool)
    psnr_values = []
    violations = 0
    for ti, target_labels in enumerate(targets):
        x_adv = generate_adversarial(source, x, target_labels, spec, seed=derive_seed(seed, "target", ti))
        violations += _check_ball(x_adv, x, spec.epsilon)
        undef_hit |= _predict(target, x_adv) == target_labels
        purified = _apply_defense(defense, x_adv)
        def_hit |= _predict(target, purified) == target_labels
        psnr_values.append(psnr(purified, x))
    undefended = float((~undef_hit).float().mean())
    defended = float((~def_hit).float().mean())
    return undefended, defended, float(np.mean(psnr_values)), violations


def evaluate(target: TargetModel, defense: nn.Module | None, dataset: DatasetSpec,
             attacks: list[AttackSpec], substitute: TargetModel | None = None, *,
             batch_size: int = 64, seed: int = 0, defense_id: str | None = None,
             resize_policy: str = "error") -> EvalReport:
    """Measure clean and per-attack accuracy with and without the defense.

    Adversarial examples come from ``substitute`` when given (the black-box
    transfer protocol) and from the target itself otherwise (white-box
    sanity mode). The eps-ball invariant is re-checked on every consumed
    batch rather than trusted from generation.
    """
    freeze(target)
    source = substitute if substitute is not None else target
    if substitute is not None:
        freeze(substitute)
    source = _resolve_source(source, dataset, resize_policy)
    if defense is not None:
        defense.eval()

    clean_correct_undef = clean_correct_def = total = 0
    sums = [{"undef": 0.0, "def": 0.0, "psnr": [], "viol": 0} for _ in attacks]

    for bi, (x, y) in enumerate(load_batches(dataset, batch_size, seed=derive_seed(seed, "eval-data"))):
        clean_correct_undef += int((_predict(target, x) == y).sum())
        clean_correct_def += int((_predict(target, _apply_defense(defense, x)) == y).sum())
        total += int(y.numel())
        for si, spec in enumerate(attacks):
            acc = sums[si]
            batch_seed = derive_seed(seed, "eval-attack", spec.family, si, bi)
            if spec.targeted and spec.target_rule == "top9":
                undef, defended, quality, violations = _targeted_outcome(
                    source, target, defense, x, y, spec, batch_seed)
                acc["undef"] += undef * y.numel()
                acc["def"] += defended * y.numel()
                acc["psnr"].append(quality)
                acc["viol"] += violations
                continue
            x_adv = generate_adversarial(source, x, y, spec, seed=batch_seed)
            acc["viol"] += _check_ball(x_adv, x, spec.epsilon)
            acc["undef"] += int((_predict(target, x_adv) == y).sum())
            purified = _apply_defense(defense, x_adv)
            acc["def"] += int((_predict(target, purified) == y).sum())
            acc["psnr"].append(psnr(purified, x))

    outcomes = []
    for si, spec in enumerate(attacks):
        acc = sums[si]
        outcomes.append(AttackOutcome(
            spec=spec.to_dict(),
            undefended_accuracy=acc["undef"] / total,
            defended_accuracy=acc["def"] / total,
            psnr_purified_adv=float(np.mean(acc["psnr"])) if acc["psnr"] else 0.0,
            ball_violations=acc["viol"],
        ))
    return EvalReport(
        target_model=target.model_id,
        substitute_model=substitute.model_id if substitute is not None else None,
        defense=defense_id if defense_id is not None else (
            None if defense is None else type(defense).__name__),
        seed=seed,
        clean_undefended=clean_correct_undef / total,
        clean_defended=clean_correct_def / total,
        attacks=outcomes,
        transfer=substitute is not None,
    )


def model_transfer_eval(generator_ckpt: str | Path, unseen_target: TargetModel,
                        dataset: DatasetSpec, attacks: list[AttackSpec],
                        substitute: TargetModel | None = None, *, batch_size: int = 64,
                        seed: int = 0) -> EvalReport:
    """Evaluate a trained purifier protecting a model it never saw during
    training. If the checkpoint's training target matches the given model,
    the run proceeds but is flagged as violating the transfer protocol."""
    generator, trained_target_id, _ = load_generator(generator_ckpt)
    report = evaluate(unseen_target, generator, dataset, attacks, substitute,
                      batch_size=batch_size, seed=seed, defense_id=str(generator_ckpt))
    if trained_target_id and trained_target_id == unseen_target.model_id:
        warnings.warn("model_transfer_eval called with the training target itself; "
                      "this is not a transfer measurement")
        report.transfer = False
        report.notes.append("protocol-violation: evaluated on the training target")
    else:
        report.transfer = True
        report.notes.append(f"generator trained against {trained_target_id or 'unknown'}")
    return report


def bpda_eval(target: TargetModel, defense: nn.Module | None,
              surrogate_defense: nn.Module | None, dataset: DatasetSpec,
              spec: AttackSpec, *, straight_through: bool = False,
              batch_size: int = 64, seed: int = 0) -> EvalReport:
    """Defense-aware attacker: gradients flow through target(surrogate(x))
    (optionally with a straight-through purifier backward), and the resulting
    perturbations are applied to the actually deployed target(defense(x))."""
    if surrogate_defense is None:
        surrogate_defense = IdentityDefense()
    if straight_through:
        surrogate_defense = StraightThroughDefense(surrogate_defense)
    attacker_view = DefendedModel(surrogate_defense, target)
    report = evaluate(target, defense, dataset, [spec], substitute=attacker_view,
                      batch_size=batch_size, seed=seed)
    report.substitute_model = f"bpda({type(surrogate_defense).__name__})"
    report.transfer = True
    report.bpda = True
    return report


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def miou(pred_maps: torch.Tensor, gt_maps: torch.Tensor, num_classes: int,
         ignore_label: int = 255) -> float:
    """Mean class-wise intersection-over-union, over classes present in the
    ground truth; ignore_label pixels are excluded from both sets."""
    pred = torch.as_tensor(pred_maps).long()
    gt = torch.as_tensor(gt_maps).long()
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    valid = gt != ignore_label
    ious = []
    for k in range(num_classes):
        gt_k = (gt == k) & valid
        if not bool(gt_k.any()):
            continue
        pred_k = (pred == k) & valid
        intersection = (gt_k & pred_k).sum()
        union = (gt_k | pred_k).sum()
        ious.append(float(intersection) / float(union))
    if not ious:
        raise ValidationError("ground truth contains no valid class pixels")
    return float(sum(ious) / len(ious))


def paired_t_test(scores_a, scores_b) -> float:
    """Two-tailed paired t-test p-value. Identical zero-variance pairs give
    p = 1.0 by convention; a constant nonzero difference gives p = 0.0."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired_t_test needs two equal-length 1-D score lists")
    n = a.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 paired scores, got {n}")
    diff = a - b
    if np.all(diff == diff[0]):
        return 1.0 if diff[0] == 0.0 else 0.0
    t_stat = diff.mean() / (diff.std(ddof=1) / np.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))

"""L-infinity attack bench.

Every family produces adversarial examples inside the eps-ball around the
input and inside the [0, 1] pixel domain, deterministically for a given
(model, input, spec, seed) tuple. Gradients are taken with respect to the
input only; model parameters are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import (
    ConfigurationError,
    GradientUnavailableError,
    UnsupportedCombinationError,
    ValidationError,
)

FAMILIES = ("pgd_ce", "pgd_kl", "bim", "deepfool", "cw", "loss_selective")


@dataclass(frozen=True)
class AttackSpec:
    """Attack family plus its knobs. epsilon/alpha are fractions of the
    pixel range (the 0.031x255 style settings divided by 255)."""

    family: str = "pgd_ce"
    epsilon: float = 0.031
    alpha: float = 0.0075
    steps: int = 8
    targeted: bool = False
    target_rule: str = "none"  # "none" | "top9"
    translation_invariant: bool = False
    ti_kernel_size: int = 5
    random_start: bool = True  # noise init for pgd_ce / pgd_kl / cw / loss_selective

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}; known: {FAMILIES}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.alpha < 0 or self.alpha > self.epsilon + 1e-12:
            raise ConfigurationError(f"alpha must satisfy 0 <= alpha <= epsilon, got {self.alpha}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.target_rule not in ("none", "top9"):
            raise ConfigurationError(f"unknown target_rule {self.target_rule!r}")
        if self.ti_kernel_size < 1 or self.ti_kernel_size % 2 == 0:
            raise ConfigurationError("ti_kernel_size must be a positive odd integer")

    def to_dict(self) -> dict:
        return asdict(self)


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Project onto the L-inf ball of radius epsilon around x, then onto [0, 1]."""
    if x_adv.shape != x.shape:
        raise ValidationError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    return (x + (x_adv - x).clamp(-epsilon, epsilon)).clamp(0.0, 1.0)


def _gaussian_kernel(size: int) -> torch.Tensor:
    sigma = size / 3.0
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2.0 * sigma**2))
    k = torch.outer(g, g)
    return k / k.sum()


def _smooth_gradient(grad: torch.Tensor, size: int) -> torch.Tensor:
    """Translation-invariant trick: blur the gradient before the sign step."""
    if size == 1:
        return grad
    channels = grad.shape[1]
    kernel = _gaussian_kernel(size).to(grad.dtype).expand(channels, 1, size, size)
    return F.conv2d(grad, kernel, padding=size // 2, groups=channels)


def _input_gradient(loss: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    try:
        (grad,) = torch.autograd.grad(loss, delta)
    except RuntimeError as exc:
        raise GradientUnavailableError(f"model does not expose input gradients: {exc}") from exc
    return grad.detach()


def _cw_margin(logits: torch.Tensor, y: torch.Tensor, targeted: bool) -> torch.Tensor:
    """Carlini-Wagner margin, averaged over the batch (and spatial positions
    for dense outputs). Untargeted: runner-up minus true logit; targeted:
    target logit minus best other."""
    if logits.dim() > 2:  # (B, K, ...) dense outputs -> (B*positions, K)
        k = logits.shape[1]
        logits = logits.movedim(1, -1).reshape(-1, k)
        y = y.reshape(-1)
    onehot = F.one_hot(y, logits.shape[1]).bool()
    chosen = logits[onehot]
    best_other = logits.masked_fill(onehot, float("-inf")).amax(dim=1)
    margin = (chosen - best_other) if targeted else (best_other - chosen)
    return margin.mean()


def _criterion(spec: AttackSpec, model, x_pert, y, clean_probs, loss_fn):
    """Scalar objective to ASCEND on (sign already folded for targeted)."""
    if spec.family in ("pgd_ce", "bim"):
        ce = F.cross_entropy(model(x_pert), y)
        return -ce if spec.targeted else ce
    if spec.family == "pgd_kl":
        return F.kl_div(F.log_softmax(model(x_pert), dim=1), clean_probs, reduction="batchmean")
    if spec.family == "cw":
        return _cw_margin(model(x_pert), y, spec.targeted)
    if spec.family == "loss_selective":
        loss = loss_fn(model, x_pert, y)
        return -loss if spec.targeted else loss
    raise ConfigurationError(f"no iterative criterion for family {spec.family!r}")


def _iterative_attack(model, x, y, spec: AttackSpec, seed: int, loss_fn=None) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    if spec.random_start and spec.family != "bim":
        noise = (torch.rand(x.shape, generator=gen, dtype=x.dtype) * 2.0 - 1.0) * spec.epsilon
        delta = (x + noise).clamp(0.0, 1.0) - x
    else:
        delta = torch.zeros_like(x)

    clean_probs = None
    if spec.family == "pgd_kl":
        with torch.no_grad():
            clean_probs = F.softmax(model(x), dim=1)

    for _ in range(spec.steps):
        delta = delta.detach().requires_grad_(True)
        loss = _criterion(spec, model, x + delta, y, clean_probs, loss_fn)
        grad = _input_gradient(loss, delta)
        if spec.translation_invariant:
            grad = _smooth_gradient(grad, spec.ti_kernel_size)
        delta = delta.detach() + spec.alpha * grad.sign()
        delta = delta.clamp(-spec.epsilon, spec.epsilon)
        delta = (x + delta).clamp(0.0, 1.0) - x
    return x + delta.detach()


def _deepfool_single(model, x0: torch.Tensor, steps: int, overshoot: float = 0.02,
                     max_candidates: int = 9) -> torch.Tensor:
    """L-inf flavoured DeepFool for one sample: iterate minimal linearised
    steps toward the nearest decision boundary, stop when the label flips."""
    with torch.no_grad():
        logits0 = model(x0.unsqueeze(0))[0]
    orig = int(logits0.argmax())
    candidates = logits0.argsort(descending=True).tolist()
    candidates = [k for k in candidates if k != orig][:max_candidates]

    x = x0.clone()
    for _ in range(steps):
        x_req = x.detach().requires_grad_(True)
        logits = model(x_req.unsqueeze(0))[0]
        if int(logits.argmax()) != orig:
            break
        try:
            grad_orig = torch.autograd.grad(logits[orig], x_req, retain_graph=True)[0]
        except RuntimeError as exc:
            raise GradientUnavailableError(f"model does not expose input gradients: {exc}") from exc
        best_ratio, best_w, best_f = None, None, None
        for k in candidates:
            grad_k = torch.autograd.grad(logits[k], x_req, retain_graph=True)[0]
            w = grad_k - grad_orig
            f = (logits[k] - logits[orig]).detach()
            w_norm = w.abs().sum() + 1e-12
            ratio = f.abs() / w_norm
            if best_ratio is None or ratio < best_ratio:
                best_ratio, best_w, best_f = ratio, w.detach(), f
        step = (best_f.abs() + 1e-4) / (best_w.abs().sum() + 1e-12) * best_w.sign()
        x = (x.detach() + (1.0 + overshoot) * step).clamp(0.0, 1.0)
    return x.detach()


def generate_adversarial(model, x: torch.Tensor, y, spec: AttackSpec, seed: int = 0,
                         loss_fn=None) -> torch.Tensor:
    """Generate adversarial examples for a batch.

    ``y`` holds ground-truth labels for untargeted attacks and target labels
    when ``spec.targeted`` is set. ``loss_fn(model, x, y)`` supplies the
    scalar objective for the ``loss_selective`` family (the generalisation of
    per-head attacks such as classification-only or localisation-only).
    """
    if spec.family == "loss_selective" and loss_fn is None:
        raise ConfigurationError("loss_selective attacks require a loss_fn")
    if spec.targeted and spec.family in ("deepfool", "pgd_kl"):
        raise UnsupportedCombinationError(f"targeted mode is not supported for {spec.family}")

    if spec.epsilon == 0.0:
        return x.clone()

    was_training = model.training
    model.eval()
    try:
        if spec.family == "deepfool":
            adv = torch.stack(
                [_deepfool_single(model, x[i], spec.steps) for i in range(x.shape[0])]
            )
            adv = project_linf(adv, x, spec.epsilon)
        else:
            adv = _iterative_attack(model, x, y, spec, seed, loss_fn)
            adv = project_linf(adv, x, spec.epsilon)
    finally:
        model.train(was_training)
    return adv

"""Purifier training: the alternating generator/discriminator loop with
on-the-fly adversarial example generation, per-step metrics, per-epoch
alignment diagnostics, and losslessly resumable checkpoints."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from ._util import derive_seed, param_hash
from .attacks import AttackSpec, generate_adversarial
from .data import DatasetSpec, load_arrays, load_batches, num_batches
from .diagnostics import proxy_a_distance
from .errors import ConfigurationError, NonFiniteLossError
from .features import class_centers, group_by_class, l2_normalize_rows
from .losses import (
    LossParts,
    LossWeights,
    class_aware_losses,
    feature_losses_from_outputs,
    gan_losses,
    pixel_losses,
    total_generator_loss,
)
from .models import (
    DiscriminatorConfig,
    FixedFeatureExtractor,
    GeneratorConfig,
    TargetModel,
    build_discriminator,
    build_generator,
    freeze,
    target_forward,
)

CHECKPOINT_FORMAT = "purifier-ckpt-v1"

PIXEL_ABLATIONS = ("ours", "traditional", "abla_pixel_I", "abla_pixel_II")
FEATURE_ABLATIONS = ("ours", "abla_feature_I", "abla_feature_II", "off")


@dataclass
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    grad_clip: float = 10.0


@dataclass
class AblationConfig:
    """Which variant of each constraint group is active.

    pixel: "ours" | "traditional" | "abla_pixel_I" (traditional reconstruction,
    our adversarial loss) | "abla_pixel_II" (our reconstruction, traditional
    adversarial loss). feature: "ours" | "abla_feature_I" | "abla_feature_II"
    | "off". class_aware gates the center losses.
    """

    pixel: str = "ours"
    feature: str = "ours"
    class_aware: bool = True

    def __post_init__(self):
        if self.pixel not in PIXEL_ABLATIONS:
            raise ConfigurationError(f"pixel ablation must be one of {PIXEL_ABLATIONS}")
        if self.feature not in FEATURE_ABLATIONS:
            raise ConfigurationError(f"feature ablation must be one of {FEATURE_ABLATIONS}")

    def pixel_modes(self) -> tuple[str, str]:
        """(reconstruction mode, adversarial-loss mode) for the pixel flag."""
        return {
            "ours": ("ours", "ours"),
            "traditional": ("traditional", "traditional"),
            "abla_pixel_I": ("traditional", "ours"),
            "abla_pixel_II": ("ours", "traditional"),
        }[self.pixel]


@dataclass
class TrainConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(
        family="pgd_kl", epsilon=0.031, alpha=0.0175, steps=4))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    batch_size: int = 32
    epochs: int = 20
    max_steps: int | None = None  # overrides epochs when set (0 = emit initial checkpoint only)
    seed: int = 0
    checkpoint_every: int = 0  # extra mid-run checkpoints every N steps (0 = off)
    proxy_a_every: int = 1  # epochs between alignment diagnostics (0 = off)
    proxy_a_samples: int = 96
    normalize_features: bool = True
    perceptual_seed: int = 0
    out_dir: str = "runs/train"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigurationError("epochs/max_steps must be non-negative")

    def total_steps(self) -> int:
        per_epoch = num_batches(self.dataset, self.batch_size)
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * per_epoch


@dataclass
class TrainState:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    perceptual: FixedFeatureExtractor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0


def init_train_state(config: TrainConfig) -> TrainState:
    generator = build_generator(config.generator, seed=derive_seed(config.seed, "generator-init"))
    discriminator = build_discriminator(config.discriminator, seed=derive_seed(config.seed, "disc-init"))
    perceptual = FixedFeatureExtractor(seed=config.perceptual_seed)
    opt = config.optimizer
    opt_g = torch.optim.Adam(generator.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2))
    return TrainState(generator, discriminator, perceptual, opt_g, opt_d, step=0)


def _zero(requires_grad: bool = False) -> torch.Tensor:
    return torch.zeros((), requires_grad=requires_grad)


def train_step(state: TrainState, batch, target: TargetModel, config: TrainConfig) -> dict:
    """One iteration: generate adversarials from the frozen target, update
    the generator with the full weighted objective, then update the
    discriminator. Returns a metrics dict with every loss term."""
    x_clean, labels = batch
    state.generator.train()
    state.discriminator.train()

    attack_seed = derive_seed(config.seed, "train-attack", state.step)
    x_adv = generate_adversarial(target, x_clean, labels, config.attack, seed=attack_seed)

    purified_clean = state.generator(x_clean)
    purified_adv = state.generator(x_adv)

    rec_mode, gan_mode = config.ablation.pixel_modes()
    recon, perceptual = pixel_losses(purified_clean, x_clean, purified_adv, state.perceptual, mode=rec_mode)
    _, gan_g, feature_match = gan_losses(
        state.discriminator, purified_clean, purified_adv, mode=gan_mode, clean=x_clean)

    task = feature_recon = _zero()
    align = intra = inter = _zero()
    need_features = config.ablation.feature != "off" or config.ablation.class_aware
    if need_features:
        outputs_pc, feats_pc = target_forward(target, purified_clean)
        outputs_pa, feats_pa = target_forward(target, purified_adv)
        with torch.no_grad():
            _, feats_clean = target_forward(target, x_clean)
    if config.ablation.feature != "off":
        feature_mode = "abla_feature_I" if config.ablation.feature == "abla_feature_I" else "ours"
        task, feature_recon = feature_losses_from_outputs(
            outputs_pc, outputs_pa, feats_pc, feats_pa, feats_clean,
            labels, target.task_kind, mode=feature_mode)
    if config.ablation.class_aware:
        clean_side = feats_pc if config.ablation.feature == "abla_feature_II" else feats_clean
        class_mode = "abla_feature_II" if config.ablation.feature == "abla_feature_II" else "ours"
        adv_side = feats_pa
        if config.normalize_features:
            clean_side = l2_normalize_rows(clean_side, dim=1)
            adv_side = l2_normalize_rows(adv_side, dim=1)
        group_seed = derive_seed(config.seed, "grouping", state.step)
        clean_set = group_by_class(clean_side, labels, target.task_kind, target.num_classes, seed=group_seed)
        adv_set = group_by_class(adv_side, labels, target.task_kind, target.num_classes, seed=group_seed)
        align, intra, inter, _ = class_aware_losses(
            class_centers(clean_set), adv_set, class_centers(adv_set),
            config.loss_weights, mode=class_mode)

    parts = LossParts(
        recon=recon, perceptual=perceptual, feature_match=feature_match,
        gan_g=gan_g, gan_d=0.0, task=task, feature_recon=feature_recon,
        center_align=align, inter_class=inter, intra_class=intra,
    )
    total = total_generator_loss(parts, config.loss_weights)

    state.opt_g.zero_grad()
    total.backward()
    if config.optimizer.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.generator.parameters(), config.optimizer.grad_clip)
    state.opt_g.step()

    gan_d, _, _ = gan_losses(
        state.discriminator, purified_clean.detach(), purified_adv.detach(),
        mode=gan_mode, clean=x_clean)
    if not bool(torch.isfinite(gan_d)):
        raise NonFiniteLossError(f"loss term 'gan_d' is non-finite: {float(gan_d)}")
    state.opt_d.zero_grad()
    gan_d.backward()
    if config.optimizer.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.discriminator.parameters(), config.optimizer.grad_clip)
    state.opt_d.step()

    state.step += 1
    parts.gan_d = gan_d
    metrics = {"step": state.step, **parts.to_dict(), "total": float(total)}
    return metrics


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def _config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(payload: dict) -> TrainConfig:
    payload = dict(payload)
    payload["dataset"] = DatasetSpec(**payload["dataset"])
    gen = dict(payload["generator"])
    gen["input_resolution"] = tuple(gen["input_resolution"])
    payload["generator"] = GeneratorConfig(**gen)
    disc = dict(payload["discriminator"])
    disc["tap_layers"] = tuple(disc["tap_layers"])
    payload["discriminator"] = DiscriminatorConfig(**disc)
    payload["attack"] = AttackSpec(**payload["attack"])
    payload["loss_weights"] = LossWeights(**payload["loss_weights"])
    payload["optimizer"] = OptimizerConfig(**payload["optimizer"])
    payload["ablation"] = AblationConfig(**payload["ablation"])
    return TrainConfig(**payload)


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig,
                    target_id: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "opt_g": state.opt_g.state_dict(),
            "opt_d": state.opt_d.state_dict(),
            "step": state.step,
            "torch_rng": torch.get_rng_state(),
            "config": _config_to_dict(config),
            "target_id": target_id,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path):
    """Rebuild a TrainState (and its TrainConfig) from a checkpoint archive."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(
            f"unrecognised checkpoint format {payload.get('format')!r}; expected {CHECKPOINT_FORMAT}")
    config = config_from_dict(payload["config"])
    state = init_train_state(config)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.step = int(payload["step"])
    return state, config, payload.get("target_id", "")


def load_generator(path: str | Path):
    """Load just the purifier from a checkpoint: (generator, target_id, config)."""
    state, config, target_id = load_checkpoint(path)
    generator = state.generator
    generator.eval()
    return generator, target_id, config


# ---------------------------------------------------------------------------
# Full training loop
# ---------------------------------------------------------------------------


def _append_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _proxy_eval_data(config: TrainConfig, target: TargetModel):
    spec = config.dataset.test_split()
    images, labels = load_arrays(spec)
    n = min(config.proxy_a_samples, images.shape[0])
    images, labels = images[:n], labels[:n]
    x_adv = generate_adversarial(
        target, images, labels, config.attack, seed=derive_seed(config.seed, "proxy-attack"))
    return images, x_adv


def _proxy_record(state: TrainState, epoch: int, clean: torch.Tensor, adv: torch.Tensor,
                  config: TrainConfig, base_distance: float) -> dict:
    state.generator.eval()
    with torch.no_grad():
        purified_clean = state.generator(clean)
        purified_adv = state.generator(adv)
    state.generator.train()
    seed = derive_seed(config.seed, "proxy-probe")
    pa_purified = proxy_a_distance(purified_adv, purified_clean, seed=seed)
    pa_vs_clean = proxy_a_distance(purified_adv, clean, seed=seed)
    return {
        "epoch": epoch,
        "purified_adv_vs_purified_clean": pa_purified.distance,
        "purified_adv_vs_clean": pa_vs_clean.distance,
        "adv_vs_clean": base_distance,
    }


def train(config: TrainConfig, target: TargetModel, resume_from: str | Path | None = None) -> Path:
    """Run the training loop to completion and return the final checkpoint.

    Writes metrics.jsonl (one record per step), proxy_a.jsonl (alignment
    diagnostics per epoch cadence), and numbered checkpoints under
    config.out_dir. Resuming from any checkpoint reproduces the exact
    uninterrupted run because every random draw derives from (seed, step).
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    proxy_path = out_dir / "proxy_a.jsonl"

    freeze(target)
    target_id = target.model_id

    if resume_from is not None:
        state, loaded_config, loaded_target = load_checkpoint(resume_from)
        if dataclasses.asdict(loaded_config) != dataclasses.asdict(config):
            raise ConfigurationError("resume config does not match the checkpoint's config")
        if loaded_target and loaded_target != target_id:
            raise ConfigurationError("resume target model differs from the checkpoint's target")
    else:
        state = init_train_state(config)
        save_checkpoint(out_dir / "ckpt-0000000.pt", state, config, target_id)

    steps_total = config.total_steps()
    per_epoch = num_batches(config.dataset, config.batch_size)

    proxy_clean = proxy_adv = None
    base_distance = None
    if config.proxy_a_every > 0 and steps_total > 0:
        proxy_clean, proxy_adv = _proxy_eval_data(config, target)
        base_distance = proxy_a_distance(
            proxy_adv, proxy_clean, seed=derive_seed(config.seed, "proxy-probe")).distance
        if state.step == 0:
            _append_jsonl(proxy_path, _proxy_record(state, 0, proxy_clean, proxy_adv, config, base_distance))

    while state.step < steps_total:
        epoch = state.step // per_epoch
        skip = state.step % per_epoch  # mid-epoch resume: fast-forward the stream
        for bi, batch in enumerate(load_batches(config.dataset, config.batch_size, config.seed, epoch)):
            if bi < skip:
                continue
            try:
                metrics = train_step(state, batch, target, config)
            except NonFiniteLossError:
                save_checkpoint(out_dir / f"ckpt-{state.step:07d}.pt", state, config, target_id)
                raise
            metrics["epoch"] = epoch
            _append_jsonl(metrics_path, metrics)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt-{state.step:07d}.pt", state, config, target_id)
            if state.step >= steps_total:
                break
        finished_epoch = (state.step % per_epoch == 0) and state.step > 0
        if (proxy_clean is not None and finished_epoch
                and (state.step // per_epoch) % config.proxy_a_every == 0):
            _append_jsonl(proxy_path, _proxy_record(
                state, state.step // per_epoch, proxy_clean, proxy_adv, config, base_distance))

    final_path = save_checkpoint(out_dir / "ckpt-final.pt", state, config, target_id)
    return final_path


# ---------------------------------------------------------------------------
# Target-model fitting (plumbing: the defense assumes a pre-trained target)
# ---------------------------------------------------------------------------


def fit_classifier(model: TargetModel, train_spec: DatasetSpec, *, epochs: int = 40,
                   batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                   test_spec: DatasetSpec | None = None, target_accuracy: float = 0.995,
                   check_every: int = 5) -> dict:
    """Train a task model with Adam + cross-entropy; stops early once train
    accuracy reaches target_accuracy. Returns accuracy stats."""
    optimiser = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        for x, y in load_batches(train_spec, batch_size, derive_seed(seed, "fit"), epoch):
            optimiser.zero_grad()
            loss = F.cross_entropy(model(x), y)
            loss.backward()
            optimiser.step()
        if check_every and (epoch + 1) % check_every == 0:
            if accuracy(model, train_spec) >= target_accuracy:
                break
            model.train()
    model.eval()
    stats = {"train_accuracy": accuracy(model, train_spec), "param_hash": param_hash(model)}
    if test_spec is not None:
        stats["test_accuracy"] = accuracy(model, test_spec)
    return stats


def fit_target(arch: str, train_spec: DatasetSpec, *, epochs: int = 40, batch_size: int = 64,
               lr: float = 1e-3, seed: int = 0, test_spec: DatasetSpec | None = None,
               target_accuracy: float = 0.995, max_restarts: int = 2):
    """Build and fit a target model, restarting from a derived seed when a
    run fails to converge on the training set. Returns (model, stats)."""
    from .models import build_target

    best_model, best_stats = None, None
    for attempt in range(max_restarts + 1):
        attempt_seed = seed if attempt == 0 else derive_seed(seed, "restart", attempt)
        model = build_target(arch, train_spec.num_classes, train_spec.resolution, seed=attempt_seed)
        stats = fit_classifier(model, train_spec, epochs=epochs, batch_size=batch_size, lr=lr,
                               seed=attempt_seed, test_spec=test_spec,
                               target_accuracy=target_accuracy)
        stats["restarts"] = attempt
        if best_stats is None or stats["train_accuracy"] > best_stats["train_accuracy"]:
            best_model, best_stats = model, stats
        if stats["train_accuracy"] >= target_accuracy:
            break
    return best_model, best_stats


def accuracy(model: TargetModel, spec: DatasetSpec, batch_size: int = 256) -> float:
    """Plain classification accuracy of a model over a dataset split."""
    was_training = model.training
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for x, y in load_batches(spec, batch_size, seed=0, epoch=0):
            pred = model(x).argmax(dim=1)
            correct += int((pred == y).sum())
            total += int(y.numel())
    model.train(was_training)
    return correct / total

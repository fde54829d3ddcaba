"""Model zoo: frozen target models, purifier generators, and the patch
discriminator with feature taps.

Target models expose a single designated feature layer (penultimate FC for
classifiers, last conv before the logit head for segmenters, the backbone
output for detectors); everything downstream of that contract is task
agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from ._util import param_hash
from .errors import ConfigurationError, UnsupportedTaskError

TASK_KINDS = ("classification", "segmentation", "detection")


# ---------------------------------------------------------------------------
# Target models
# ---------------------------------------------------------------------------


class TargetModel(nn.Module):
    """Base class for the frozen task network being protected.

    Subclasses implement ``forward`` (task outputs) and
    ``forward_with_features`` returning ``(outputs, features)`` in one pass,
    where ``features`` come from the designated intermediate layer.
    """

    task_kind: str = "classification"

    def __init__(self, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes

    @property
    def model_id(self) -> str:
        """Identity of this model instance: architecture + current weights."""
        return f"{type(self).__name__}-k{self.num_classes}-{param_hash(self)[:12]}"

    def forward_with_features(self, x: torch.Tensor):
        raise NotImplementedError

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[1]


class SmallConvNet(TargetModel):
    """Desk-scale 4-conv classifier; feature tap is the penultimate FC layer."""

    def __init__(self, num_classes: int = 10, base_channels: int = 32, feature_dim: int = 128):
        super().__init__(num_classes)
        c = base_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(2),
        )
        self.feature_dim = feature_dim
        self.fc = nn.Linear(4 * c * 4, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def forward_with_features(self, x):
        h = self.trunk(x).flatten(1)
        feats = F.relu(self.fc(h))
        return self.head(feats), feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


class SlimConvNet(TargetModel):
    """Alternative small classifier (5x5 kernels + max-pooling); used as the
    attacker's substitute architecture in transfer evaluations."""

    def __init__(self, num_classes: int = 10, base_channels: int = 24, feature_dim: int = 96):
        super().__init__(num_classes)
        c = base_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 5, padding=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(c, 2 * c, 5, padding=2),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * c, 4 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(2),
        )
        self.feature_dim = feature_dim
        self.fc = nn.Linear(4 * c * 4, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def forward_with_features(self, x):
        h = self.trunk(x).flatten(1)
        feats = F.relu(self.fc(h))
        return self.head(feats), feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


class MlpNet(TargetModel):
    """Fully-connected classifier on raw pixels; the 'third architecture'
    for generator model-transfer checks."""

    def __init__(self, num_classes: int = 10, resolution: int = 32, hidden: int = 256, feature_dim: int = 128):
        super().__init__(num_classes)
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Flatten(),
            nn.Linear(3 * resolution * resolution, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, feature_dim),
        )
        self.head = nn.Linear(feature_dim, num_classes)

    def forward_with_features(self, x):
        feats = F.relu(self.body(x))
        return self.head(feats), feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


class DeepConvNet(TargetModel):
    """Deeper narrow stack of stride-mixed convolutions; the third
    architecture for generator model-transfer checks."""

    def __init__(self, num_classes: int = 10, base_channels: int = 20, feature_dim: int = 80):
        super().__init__(num_classes)
        c = base_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(4 * c, 4 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.feature_dim = feature_dim
        self.fc = nn.Linear(4 * c, feature_dim)
        self.head = nn.Linear(feature_dim, num_classes)

    def forward_with_features(self, x):
        h = self.trunk(x).flatten(1)
        feats = F.relu(self.fc(h))
        return self.head(feats), feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


class SmallSegNet(TargetModel):
    """Tiny stride-8 segmentation net. The feature tap is the conv layer
    before the per-pixel classifier; logits are upsampled to input size."""

    task_kind = "segmentation"

    def __init__(self, num_classes: int = 5, base_channels: int = 16):
        super().__init__(num_classes)
        c = base_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.feature_dim = 4 * c
        self.classifier = nn.Conv2d(4 * c, num_classes, 1)

    def forward_with_features(self, x):
        feats = self.encoder(x)
        logits = self.classifier(feats)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits, feats

    def forward(self, x):
        return self.forward_with_features(x)[0]


TARGET_ARCHS = {
    "small_cnn": SmallConvNet,
    "slim_cnn": SlimConvNet,
    "deep_cnn": DeepConvNet,
    "mlp": MlpNet,
    "small_seg": SmallSegNet,
}


def build_target(arch: str, num_classes: int, resolution: int = 32, seed: int = 0) -> TargetModel:
    """Construct a target model with deterministic initialisation."""
    if arch not in TARGET_ARCHS:
        raise ConfigurationError(f"unknown target architecture {arch!r}; known: {sorted(TARGET_ARCHS)}")
    torch.manual_seed(seed)
    if arch == "mlp":
        return MlpNet(num_classes, resolution=resolution)
    return TARGET_ARCHS[arch](num_classes)


def freeze(model: nn.Module) -> nn.Module:
    """Freeze parameters and switch to eval mode; returns the same module."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def save_target(path, model: TargetModel, arch: str, resolution: int) -> None:
    """Persist a trained target model with enough metadata to rebuild it."""
    torch.save(
        {
            "arch": arch,
            "num_classes": model.num_classes,
            "resolution": resolution,
            "task_kind": model.task_kind,
            "state": model.state_dict(),
        },
        path,
    )


def load_target(path) -> TargetModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = build_target(payload["arch"], payload["num_classes"], payload["resolution"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def target_forward(model: TargetModel, x: torch.Tensor):
    """Run the target model, returning (task outputs, designated features)."""
    task = getattr(model, "task_kind", None)
    if task not in TASK_KINDS:
        raise UnsupportedTaskError(f"unknown task_kind {task!r}; expected one of {TASK_KINDS}")
    return model.forward_with_features(x)


# ---------------------------------------------------------------------------
# Purifier generators
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    input_resolution: tuple[int, int] = (32, 32)
    num_downsample: int = 2
    num_residual_blocks: int = 4
    base_channels: int = 32
    arch: str = "global"  # "global" (resnet-style) or "unet" (surrogate flavour)

    def __post_init__(self):
        h, w = self.input_resolution
        factor = 2**self.num_downsample
        if h % factor or w % factor:
            raise ConfigurationError(
                f"input resolution {h}x{w} must be divisible by 2^{self.num_downsample}"
            )
        if self.num_residual_blocks < 1:
            raise ConfigurationError("num_residual_blocks must be >= 1")
        if self.arch not in ("global", "unet"):
            raise ConfigurationError(f"unknown generator arch {self.arch!r}")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
        )

    def forward(self, x):
        return x + self.block(x)


class PurifierGenerator(nn.Module):
    """Image-to-image purifier: downsampling convs, residual bottleneck,
    upsampling convs. No normalisation layers: per-image intensity must
    survive to the output for faithful reconstruction. Output is squashed to
    the canonical [0, 1] pixel domain, so zeroing the last conv yields
    mid-gray everywhere."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, c, 7), nn.ReLU(inplace=True)]
        ch = c
        for _ in range(config.num_downsample):
            layers += [
                nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(config.num_residual_blocks)]
        for _ in range(config.num_downsample):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.out_pad = nn.ReflectionPad2d(3)
        self.out_conv = nn.Conv2d(ch, 3, 7)

    def forward(self, x):
        _check_resolution(x, self.config)
        y = self.out_conv(self.out_pad(self.body(x)))
        return (torch.tanh(y) + 1.0) / 2.0


class UNetPurifier(nn.Module):
    """Encoder/decoder purifier with skip connections; the structurally
    different generator used when simulating an attacker's local defense."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.enc1 = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.ReLU(inplace=True))
        self.enc2 = nn.Sequential(nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.enc3 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), nn.ReLU(inplace=True))
        self.dec2 = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 3, stride=2, padding=1, output_padding=1),
            nn.ReLU(inplace=True),
        )
        self.dec1 = nn.Sequential(
            nn.ConvTranspose2d(4 * c, c, 3, stride=2, padding=1, output_padding=1),
            nn.ReLU(inplace=True),
        )
        self.out_conv = nn.Conv2d(2 * c, 3, 3, padding=1)

    def forward(self, x):
        _check_resolution(x, self.config)
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = torch.cat([self.dec2(e3), e2], dim=1)
        d1 = torch.cat([self.dec1(d2), e1], dim=1)
        y = self.out_conv(d1)
        return (torch.tanh(y) + 1.0) / 2.0


def _check_resolution(x: torch.Tensor, config: GeneratorConfig) -> None:
    h, w = config.input_resolution
    if x.dim() != 4 or x.shape[-2:] != (h, w):
        raise ConfigurationError(
            f"generator expects inputs of shape (B, 3, {h}, {w}), got {tuple(x.shape)}"
        )


def build_generator(config: GeneratorConfig, seed: int = 0) -> nn.Module:
    """Construct a purifier generator with deterministic initialisation."""
    torch.manual_seed(seed)
    if config.arch == "unet":
        return UNetPurifier(config)
    return PurifierGenerator(config)


def generator_apply(generator: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply the purifier; output matches input shape and stays in [0, 1]."""
    return generator(x)


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    scales: int = 1
    base_channels: int = 16
    num_layers: int = 3
    tap_layers: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.scales < 1:
            raise ConfigurationError("scales must be >= 1")
        n_blocks = self.num_layers + 2
        bad = [t for t in self.tap_layers if not 0 <= t < n_blocks]
        if bad:
            raise ConfigurationError(f"tap layers {bad} out of range for {n_blocks} blocks")


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator split into blocks so intermediate activations
    can be tapped for the feature-matching loss. With num_layers=3 there are
    five blocks; the last block's output is the (unbounded) LSGAN score map."""

    def __init__(self, base_channels: int = 16, num_layers: int = 3):
        super().__init__()
        c = base_channels
        blocks = [nn.Sequential(nn.Conv2d(3, c, 4, stride=2, padding=2), nn.LeakyReLU(0.2, inplace=True))]
        ch = c
        for i in range(1, num_layers):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=2),
                    nn.InstanceNorm2d(2 * ch),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            ch *= 2
        blocks.append(
            nn.Sequential(
                nn.Conv2d(ch, 2 * ch, 4, stride=1, padding=2),
                nn.InstanceNorm2d(2 * ch),
                nn.LeakyReLU(0.2, inplace=True),
            )
        )
        blocks.append(nn.Sequential(nn.Conv2d(2 * ch, 1, 4, stride=1, padding=2)))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        outs = []
        h = x
        for block in self.blocks:
            h = block(h)
            outs.append(h)
        return outs


class MultiscaleDiscriminator(nn.Module):
    """One PatchDiscriminator per image scale; coarser scales see the input
    downsampled by average pooling."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.nets = nn.ModuleList(
            PatchDiscriminator(config.base_channels, config.num_layers) for _ in range(config.scales)
        )
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, x):
        scores, taps = [], []
        h = x
        for net in self.nets:
            outs = net(h)
            scores.append(outs[-1])
            taps.extend(outs[i] for i in self.config.tap_layers)
            h = self.downsample(h)
        return scores, taps


def build_discriminator(config: DiscriminatorConfig, seed: int = 0) -> MultiscaleDiscriminator:
    torch.manual_seed(seed)
    return MultiscaleDiscriminator(config)


def discriminator_apply(disc: MultiscaleDiscriminator, x: torch.Tensor):
    """Score an image batch: (score maps, tap tensors), one score per scale
    and one tap per (scale, tap layer)."""
    return disc(x)


# ---------------------------------------------------------------------------
# Fixed perceptual feature extractor
# ---------------------------------------------------------------------------


class FixedFeatureExtractor(nn.Module):
    """Frozen convolutional feature pyramid for the perceptual loss.

    No pretrained weights are shipped; a seeded random extractor keeps the
    loss contract (fixed network, L1 in feature space) intact and the run
    config records the seed.
    """

    def __init__(self, seed: int = 0, base_channels: int = 16, stages: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        in_ch = 3
        ch = base_channels
        for _ in range(stages):
            conv = nn.Conv2d(in_ch, ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.2)
                conv.bias.zero_()
            convs.append(conv)
            in_ch, ch = ch, ch * 2
        self.convs = nn.ModuleList(convs)
        freeze(self)

    def forward(self, x):
        feats = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

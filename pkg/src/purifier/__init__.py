"""Generative purifier defense against transferable L-inf adversarial
examples: pixel- and feature-level alignment training, an attack bench,
and evaluation/diagnostic tooling."""

from .attacks import AttackSpec, generate_adversarial, project_linf
from .data import DatasetSpec, load_batches, make_synthetic_dataset
from .diagnostics import export_embeddings, proxy_a_distance, psnr
from .evaluation import bpda_eval, evaluate, miou, model_transfer_eval, paired_t_test
from .features import ClassCenters, ClassFeatureSet, class_centers, group_by_class
from .losses import (
    LossParts,
    LossWeights,
    class_aware_losses,
    feature_losses,
    gan_losses,
    pixel_losses,
    total_generator_loss,
)
from .models import (
    DiscriminatorConfig,
    FixedFeatureExtractor,
    GeneratorConfig,
    MultiscaleDiscriminator,
    PurifierGenerator,
    TargetModel,
    UNetPurifier,
    build_discriminator,
    build_generator,
    build_target,
    discriminator_apply,
    freeze,
    generator_apply,
    target_forward,
)
from .training import TrainConfig, TrainState, fit_classifier, load_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "generate_adversarial", "project_linf",
    "DatasetSpec", "load_batches", "make_synthetic_dataset",
    "export_embeddings", "proxy_a_distance", "psnr",
    "bpda_eval", "evaluate", "miou", "model_transfer_eval", "paired_t_test",
    "ClassCenters", "ClassFeatureSet", "class_centers", "group_by_class",
    "LossParts", "LossWeights", "class_aware_losses", "feature_losses",
    "gan_losses", "pixel_losses", "total_generator_loss",
    "DiscriminatorConfig", "FixedFeatureExtractor", "GeneratorConfig",
    "MultiscaleDiscriminator", "PurifierGenerator", "TargetModel", "UNetPurifier",
    "build_discriminator", "build_generator", "build_target",
    "discriminator_apply", "freeze", "generator_apply", "target_forward",
    "TrainConfig", "TrainState", "fit_classifier", "load_checkpoint", "train", "train_step",
]

"""Command-line entry point.

Subcommands share one TOML config format (sections listed in config.py);
flags override file values via dotted paths, e.g.::

    purifier train --config run.toml --train.epochs 10 --attack.steps 4
    purifier attack --config run.toml --attack.family pgd_ce
    purifier eval --eval.checkpoint runs/.../ckpt-final.pt
    purifier proxy-a --proxya.file_a a.npz --proxya.file_b b.npz
    purifier export-embed --embed.target_checkpoint runs/.../target.pt
    purifier report --report.path runs/.../report.json

Every run writes its artifacts under a fresh ``runs/<timestamp>-<tag>/``
directory (never overwriting an earlier run), starting with the resolved
config and its provenance.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .attacks import AttackSpec, generate_adversarial
from .config import ResolvedConfig, parse_overrides, resolve_config
from .data import DatasetSpec, load_batches
from .diagnostics import export_embeddings, proxy_a_distance
from .errors import PurifierError, ValidationError
from .evaluation import evaluate
from .models import build_target, freeze, load_target, save_target, target_forward
from .training import (
    AblationConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    LossWeights,
    OptimizerConfig,
    TrainConfig,
    fit_classifier,
    fit_target,
    load_generator,
    train,
)

SUBCOMMANDS = ("train", "attack", "eval", "proxy-a", "export-embed", "report")

USAGE = f"""usage: purifier <subcommand> [--config FILE] [--section.key value ...]
subcommands: {', '.join(SUBCOMMANDS)}"""


def _make_run_dir(rc: ResolvedConfig) -> Path:
    root = Path(rc.get("run", "out_root"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{rc.get('run', 'tag')}"
    candidate, suffix = base, 1
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    candidate.mkdir(parents=True)
    (candidate / "resolved_config.json").write_text(rc.to_json())
    return candidate


def _dataset_specs(rc: ResolvedConfig) -> tuple[DatasetSpec, DatasetSpec]:
    d = rc.section("dataset")
    train_spec = DatasetSpec(
        source=d["source"], task_kind=d["task_kind"], resolution=d["resolution"],
        num_classes=d["num_classes"], split="train", n_per_class=d["n_per_class"],
        seed=d["seed"], noise_std=d["noise_std"], phase_jitter=d["phase_jitter"],
        augment=d["augment"], root=d["root"],
    )
    test_spec = train_spec.test_split(d["test_n_per_class"])
    return train_spec, test_spec


def _attack_spec(rc: ResolvedConfig, section: str = "attack", family: str | None = None) -> AttackSpec:
    a = rc.section(section)
    return AttackSpec(
        family=family or a["family"],
        epsilon=a["epsilon"], alpha=a["alpha"], steps=a["steps"],
        targeted=a["targeted"], target_rule=a["target_rule"],
        translation_invariant=a["translation_invariant"],
        ti_kernel_size=a.get("ti_kernel_size", 5),
        random_start=a.get("random_start", True),
    )


def _resolve_target(rc: ResolvedConfig, train_spec: DatasetSpec, test_spec: DatasetSpec,
                    run_dir: Path):
    """Load the target model from a checkpoint, or fit one and save it."""
    m = rc.section("model")
    if m["target_checkpoint"]:
        return load_target(m["target_checkpoint"])
    model, stats = fit_target(m["arch"], train_spec, epochs=m["epochs"],
                              batch_size=m["batch_size"], lr=m["lr"], seed=m["seed"],
                              test_spec=test_spec)
    save_target(run_dir / "target.pt", model, m["arch"], train_spec.resolution)
    print(f"fitted target {m['arch']}: test accuracy {stats.get('test_accuracy', 0.0):.3f}")
    return model


def _train_config(rc: ResolvedConfig, train_spec: DatasetSpec, run_dir: Path) -> TrainConfig:
    g, d, o, t, losses, ab = (rc.section(s) for s in
                              ("generator", "discriminator", "optimizer", "train", "loss", "ablation"))
    return TrainConfig(
        dataset=train_spec,
        generator=GeneratorConfig(
            input_resolution=(train_spec.resolution, train_spec.resolution),
            num_downsample=g["num_downsample"], num_residual_blocks=g["num_residual_blocks"],
            base_channels=g["base_channels"], arch=g["arch"],
        ),
        discriminator=DiscriminatorConfig(
            scales=d["scales"], base_channels=d["base_channels"], num_layers=d["num_layers"],
        ),
        attack=_attack_spec(rc),
        loss_weights=LossWeights(
            lambda1=losses["lambda1"], lambda2=losses["lambda2"], lambda3=losses["lambda3"],
            lambda4=losses["lambda4"], margin=losses["margin"], inter_mode=losses["inter_mode"],
        ),
        optimizer=OptimizerConfig(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"],
                                  grad_clip=o["grad_clip"]),
        ablation=AblationConfig(pixel=ab["pixel"], feature=ab["feature"],
                                class_aware=ab["class_aware"]),
        batch_size=t["batch_size"], epochs=t["epochs"],
        checkpoint_every=t["checkpoint_every"], proxy_a_every=t["proxy_a_every"],
        proxy_a_samples=t["proxy_a_samples"], perceptual_seed=t["perceptual_seed"],
        normalize_features=losses["normalize_features"],
        seed=rc.get("run", "seed"), out_dir=str(run_dir),
    )


def _cmd_train(rc: ResolvedConfig) -> int:
    run_dir = _make_run_dir(rc)
    train_spec, test_spec = _dataset_specs(rc)
    target = _resolve_target(rc, train_spec, test_spec, run_dir)
    config = _train_config(rc, train_spec, run_dir)
    final = train(config, target)
    print(f"training complete: {final}")
    return 0


def _cmd_attack(rc: ResolvedConfig) -> int:
    run_dir = _make_run_dir(rc)
    train_spec, test_spec = _dataset_specs(rc)
    target = _resolve_target(rc, train_spec, test_spec, run_dir)
    freeze(target)
    spec = _attack_spec(rc)
    seed = rc.get("run", "seed")
    batch_size = rc.get("eval", "batch_size")
    clean_parts, adv_parts, label_parts = [], [], []
    for bi, (x, y) in enumerate(load_batches(test_spec, batch_size, seed=seed)):
        adv = generate_adversarial(target, x, y, spec, seed=seed + bi)
        clean_parts.append(x.numpy())
        adv_parts.append(adv.numpy())
        label_parts.append(y.numpy())
    corpus = run_dir / "corpus.npz"
    np.savez(corpus,
             x_clean=np.concatenate(clean_parts),
             x_adv=np.concatenate(adv_parts),
             labels=np.concatenate(label_parts))
    sidecar = {"attack_spec": spec.to_dict(), "seed": seed, "dataset": dataclasses.asdict(test_spec)}
    (run_dir / "corpus.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))
    print(f"wrote adversarial corpus: {corpus}")
    return 0


def _cmd_eval(rc: ResolvedConfig) -> int:
    e = rc.section("eval")
    if not e["checkpoint"]:
        raise ValidationError("eval requires --eval.checkpoint pointing at a purifier checkpoint")
    run_dir = _make_run_dir(rc)
    train_spec, test_spec = _dataset_specs(rc)
    generator, _, _ = load_generator(e["checkpoint"])
    if e["target_checkpoint"]:
        target = load_target(e["target_checkpoint"])
    else:
        target = _resolve_target(rc, train_spec, test_spec, run_dir)
    substitute = None
    if e["substitute_checkpoint"]:
        substitute = load_target(e["substitute_checkpoint"])
    elif e["substitute_arch"]:
        m = rc.section("model")
        substitute, _ = fit_target(e["substitute_arch"], train_spec, epochs=m["epochs"],
                                   batch_size=m["batch_size"], lr=m["lr"], seed=m["seed"] + 1)
    attacks = [
        AttackSpec(family=f, epsilon=e["epsilon"], alpha=e["alpha"], steps=e["steps"],
                   targeted=e["targeted"], target_rule=e["target_rule"],
                   translation_invariant=e["translation_invariant"])
        for f in e["families"]
    ]
    report = evaluate(target, generator, test_spec, attacks, substitute,
                      batch_size=e["batch_size"], seed=rc.get("run", "seed"),
                      defense_id=e["checkpoint"], resize_policy=e["resize_policy"])
    (run_dir / "report.json").write_text(report.to_json())
    (run_dir / "report.csv").write_text(report.to_csv())
    print(report.to_csv())
    if report.total_ball_violations():
        print(f"eps-ball invariant violated on {report.total_ball_violations()} samples", file=sys.stderr)
        return 1
    print(f"report written: {run_dir / 'report.json'}")
    return 0


def _cmd_proxy_a(rc: ResolvedConfig) -> int:
    p = rc.section("proxya")
    if not p["file_a"] or not p["file_b"]:
        raise ValidationError("proxy-a requires --proxya.file_a and --proxya.file_b (npz archives)")
    run_dir = _make_run_dir(rc)

    def load_side(path):
        with np.load(path) as archive:
            key = p["array_key"] if p["array_key"] in archive else archive.files[0]
            return torch.from_numpy(archive[key]).float()

    report = proxy_a_distance(load_side(p["file_a"]), load_side(p["file_b"]), seed=p["seed"])
    payload = dataclasses.asdict(report)
    (run_dir / "proxy_a.json").write_text(json.dumps(payload, sort_keys=True, indent=2))
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cmd_export_embed(rc: ResolvedConfig) -> int:
    em = rc.section("embed")
    if not em["target_checkpoint"]:
        raise ValidationError("export-embed requires --embed.target_checkpoint")
    run_dir = _make_run_dir(rc)
    train_spec, test_spec = _dataset_specs(rc)
    spec = test_spec if em["split"] == "test" else train_spec
    target = load_target(em["target_checkpoint"])
    freeze(target)
    feats, labels = [], []
    with torch.no_grad():
        for x, y in load_batches(spec, rc.get("eval", "batch_size"), seed=0):
            _, f = target_forward(target, x)
            feats.append(f.reshape(f.shape[0], -1))
            labels.extend(y.tolist())
            if em["limit"] and len(labels) >= em["limit"]:
                break
    features = torch.cat(feats)[: em["limit"] or None]
    destination = export_embeddings(features, labels[: em["limit"] or None],
                                    run_dir / "embeddings.csv")
    print(f"embeddings written: {destination}")
    return 0


def _cmd_report(rc: ResolvedConfig) -> int:
    path = rc.get("report", "path")
    if not path:
        raise ValidationError("report requires --report.path pointing at a report JSON")
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != "report-v1":
        raise ValidationError(f"unsupported report schema {payload.get('schema')!r}")
    lines = ["attack,epsilon,steps,undefended,defended,psnr"]
    clean = payload["clean"]
    lines.append(f"clean,0.0,0,{clean['undefended']},{clean['defended']},")
    for o in payload["attacks"]:
        lines.append(
            f"{o['spec']['family']},{o['spec']['epsilon']},{o['spec']['steps']},"
            f"{o['undefended_accuracy']},{o['defended_accuracy']},{o['psnr_purified_adv']}")
    print("\n".join(lines))
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "proxy-a": _cmd_proxy_a,
    "export-embed": _cmd_export_embed,
    "report": _cmd_report,
}


def run(argv: list[str]) -> int:
    """Parse argv, execute the subcommand, return the process exit code
    (0 success, 2 validation error, 1 runtime failure)."""
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0 if argv else 2
    subcommand, *rest = argv
    if subcommand not in SUBCOMMANDS:
        print(f"unknown subcommand {subcommand!r}\n{USAGE}", file=sys.stderr)
        return 2

    config_path = None
    tokens = []
    i = 0
    while i < len(rest):
        if rest[i] == "--config":
            if i + 1 >= len(rest):
                print("--config needs a file path", file=sys.stderr)
                return 2
            config_path = rest[i + 1]
            i += 2
        else:
            tokens.append(rest[i])
            i += 1

    try:
        overrides = parse_overrides(tokens)
        rc = resolve_config(config_path, overrides)
        return _HANDLERS[subcommand](rc)
    except (ValidationError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PurifierError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:  # console entry point
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Alignment and quality diagnostics: Proxy-A distance between two sample
sets, PSNR, and embedding export for external projection tools."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from ._util import derive_seed
from .errors import InsufficientDataError, ValidationError


@dataclass
class ProxyAReport:
    kappa: float          # held-out error of the membership probe, clamped to [0, 0.5]
    distance: float       # 2 * (1 - 2 * kappa), in [0, 2]
    probe: str
    split_seed: int
    n_a: int
    n_b: int


def proxy_a_from_error(kappa: float) -> float:
    """Distance as a function of probe error, with kappa clamped to [0, 0.5]."""
    kappa = min(max(kappa, 0.0), 0.5)
    return 2.0 * (1.0 - 2.0 * kappa)


def proxy_a_distance(set_a: torch.Tensor, set_b: torch.Tensor, *, seed: int = 0,
                     probe_epochs: int = 500, lr: float = 0.05,
                     weight_decay: float = 1e-3) -> ProxyAReport:
    """Separability of two sample sets, measured by a linear logistic probe.

    Each set is split 50/50 into probe-train and probe-test halves (seeded);
    the probe is trained full-batch for a fixed budget and its held-out error
    gives the distance. Indistinguishable sets score near 0, perfectly
    separable sets score 2. Images may be passed directly; they are
    flattened.
    """
    a = torch.as_tensor(set_a, dtype=torch.float32).flatten(1)
    b = torch.as_tensor(set_b, dtype=torch.float32).flatten(1)
    if a.shape[0] < 10 or b.shape[0] < 10:
        raise InsufficientDataError(
            f"need at least 10 samples per side, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimensionality mismatch: {a.shape[1]} vs {b.shape[1]}")

    gen = torch.Generator().manual_seed(derive_seed(seed, "proxy-a-split"))
    train_x, train_y, test_x, test_y = [], [], [], []
    for tensor, label in ((a, 1.0), (b, 0.0)):
        perm = torch.randperm(tensor.shape[0], generator=gen)
        half = tensor.shape[0] // 2
        train_x.append(tensor[perm[:half]])
        test_x.append(tensor[perm[half:]])
        train_y.append(torch.full((half,), label))
        test_y.append(torch.full((tensor.shape[0] - half,), label))
    train_x, test_x = torch.cat(train_x), torch.cat(test_x)
    train_y, test_y = torch.cat(train_y), torch.cat(test_y)

    mean = train_x.mean(dim=0, keepdim=True)
    std = train_x.std(dim=0, keepdim=True).clamp_min(1e-6)
    train_x = (train_x - mean) / std
    test_x = (test_x - mean) / std

    torch.manual_seed(derive_seed(seed, "proxy-a-probe"))
    probe = nn.Linear(train_x.shape[1], 1)
    optimiser = torch.optim.Adam(probe.parameters(), lr=lr, weight_decay=weight_decay)
    criterion = nn.BCEWithLogitsLoss()
    for _ in range(probe_epochs):
        optimiser.zero_grad()
        loss = criterion(probe(train_x).squeeze(1), train_y)
        loss.backward()
        optimiser.step()

    with torch.no_grad():
        preds = (probe(test_x).squeeze(1) > 0).float()
    kappa = float((preds != test_y).float().mean())
    kappa = min(max(kappa, 0.0), 0.5)
    return ProxyAReport(
        kappa=kappa,
        distance=proxy_a_from_error(kappa),
        probe=f"logistic-linear(full-batch adam, {probe_epochs} epochs)",
        split_seed=seed,
        n_a=int(a.shape[0]),
        n_b=int(b.shape[0]),
    )


def psnr(a: torch.Tensor, b: torch.Tensor, cap_db: float = 99.0) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, averaged over the
    batch; identical images are capped at 99 dB."""
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a64 = torch.as_tensor(a, dtype=torch.float64)
    b64 = torch.as_tensor(b, dtype=torch.float64)
    if a64.dim() == 3:
        a64, b64 = a64.unsqueeze(0), b64.unsqueeze(0)
    mse = ((a64 - b64) ** 2).flatten(1).mean(dim=1)
    values = [cap_db if m == 0 else min(10.0 * math.log10(1.0 / float(m)), cap_db) for m in mse]
    return float(sum(values) / len(values))


def export_embeddings(features: torch.Tensor, labels, destination: str | Path) -> Path:
    """Write features + labels as CSV (columns f0..f{L-1}, label) with floats
    at 17 significant digits so a re-read is bit-exact."""
    features = torch.as_tensor(features, dtype=torch.float64)
    if features.dim() != 2:
        raise ValidationError(f"features must be (N, L), got {tuple(features.shape)}")
    labels = list(labels)
    if features.shape[0] != len(labels):
        raise ValidationError(f"{features.shape[0]} feature rows but {len(labels)} labels")
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    dim = features.shape[1]
    with destination.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dim)] + ["label"])
        for row, label in zip(features.tolist(), labels):
            writer.writerow([f"{v:.17g}" for v in row] + [int(label)])
    if not labels:
        warnings.warn(f"exported an empty embedding file to {destination}")
    return destination


def read_embeddings(path: str | Path):
    """Inverse of export_embeddings; returns (features float64, labels)."""
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 1
        rows, labels = [], []
        for row in reader:
            rows.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]))
    features = torch.tensor(rows, dtype=torch.float64) if rows else torch.zeros((0, dim), dtype=torch.float64)
    return features, labels

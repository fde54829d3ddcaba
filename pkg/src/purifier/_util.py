"""Small internal helpers: seed derivation and parameter hashing."""

from __future__ import annotations

import hashlib

import torch
from torch import nn


def derive_seed(*parts) -> int:
    """Derive a stable 63-bit seed from an arbitrary tuple of hashable parts.

    Used so every source of randomness (batch order, attack noise, probe
    splits, ...) is a pure function of the root seed plus its role, which is
    what makes interrupt/resume runs bit-identical.
    """
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**63)


def param_hash(module: nn.Module) -> str:
    """SHA-256 over a module's state dict, stable across identical weights."""
    h = hashlib.sha256()
    for key in sorted(module.state_dict()):
        tensor = module.state_dict()[key]
        h.update(key.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def mean_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements (the E(||.||_1) of the losses)."""
    return (a - b).abs().mean()

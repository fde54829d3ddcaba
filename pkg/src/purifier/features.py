"""Grouping target-model features into per-class sets and computing class
centers, for all three task formats (classification, segmentation,
detection)."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import EmptyClassSetError, UnsupportedTaskError, ValidationError


@dataclass
class ClassFeatureSet:
    """Feature vectors bucketed by class index: ``per_class[k]`` is (n_k, L)."""

    per_class: dict[int, torch.Tensor] = field(default_factory=dict)
    total_count: int = 0
    feature_dim: int = 0

    def classes(self) -> list[int]:
        return sorted(self.per_class)


@dataclass
class ClassCenters:
    """Arithmetic mean of each non-empty class bucket."""

    centers: dict[int, torch.Tensor] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(self.centers)


def l2_normalize_rows(features: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """L2-normalise feature vectors (used before center computation when the
    normalise-features flag is on)."""
    return F.normalize(features, p=2, dim=dim)


def _validate_labels(labels: torch.Tensor, num_classes: int) -> None:
    bad = ((labels < 0) | (labels >= num_classes)).nonzero()
    if bad.numel():
        idx = bad[0].tolist()
        raise ValidationError(
            f"label {int(labels[tuple(idx)])} at index {idx} out of range [0, {num_classes})"
        )


def _bucket(vectors: torch.Tensor, labels: torch.Tensor, num_classes: int) -> ClassFeatureSet:
    _validate_labels(labels, num_classes)
    per_class = {}
    for k in labels.unique().tolist():
        per_class[int(k)] = vectors[labels == k]
    return ClassFeatureSet(per_class, total_count=int(labels.numel()), feature_dim=vectors.shape[1])


def group_by_class(features, labels, task_kind: str, num_classes: int, *,
                   ignore_label: int = 255, max_pixels: int = 4096, seed: int = 0) -> ClassFeatureSet:
    """Bucket feature vectors into classes according to ground-truth labels.

    classification: features (B, L), one label per row.
    segmentation:   features (B, L, h, w), label map (B, H, W); the map is
                    nearest-resized to (h, w), ignore_label pixels dropped,
                    and at most max_pixels pixels kept (seeded uniform draw).
    detection:      features (B, L, h, w), labels a list of per-image
                    (boxes, classes) pairs with boxes in normalised x1,y1,x2,y2;
                    each box is cropped (rounding outward to grid cells) and
                    mean-pooled to one vector.
    """
    if task_kind == "classification":
        if features.dim() != 2 or labels.shape[0] != features.shape[0]:
            raise ValidationError(
                f"classification grouping expects (B, L) features and (B,) labels, "
                f"got {tuple(features.shape)} and {tuple(labels.shape)}"
            )
        return _bucket(features, labels.long(), num_classes)

    if task_kind == "segmentation":
        return _group_segmentation(features, labels, num_classes, ignore_label, max_pixels, seed)

    if task_kind == "detection":
        return _group_detection(features, labels, num_classes)

    raise UnsupportedTaskError(f"cannot group features for task {task_kind!r}")


def _group_segmentation(features, label_maps, num_classes, ignore_label, max_pixels, seed):
    if features.dim() != 4:
        raise ValidationError(f"segmentation features must be (B, L, h, w), got {tuple(features.shape)}")
    b, dim, h, w = features.shape
    resized = F.interpolate(label_maps.float().unsqueeze(1), size=(h, w), mode="nearest")
    resized = resized.squeeze(1).long()

    vectors = features.permute(0, 2, 3, 1).reshape(-1, dim)
    flat_labels = resized.reshape(-1)
    keep = flat_labels != ignore_label
    vectors, flat_labels = vectors[keep], flat_labels[keep]
    if max_pixels and vectors.shape[0] > max_pixels:
        gen = torch.Generator().manual_seed(seed)
        idx = torch.randperm(vectors.shape[0], generator=gen)[:max_pixels]
        vectors, flat_labels = vectors[idx], flat_labels[idx]
    return _bucket(vectors, flat_labels, num_classes)


def _group_detection(features, box_annotations, num_classes):
    if features.dim() != 4:
        raise ValidationError(f"detection features must be (B, L, h, w), got {tuple(features.shape)}")
    b, dim, h, w = features.shape
    if len(box_annotations) != b:
        raise ValidationError(f"expected {b} per-image box annotations, got {len(box_annotations)}")
    vectors, labels = [], []
    for img_idx, (boxes, classes) in enumerate(box_annotations):
        boxes = torch.as_tensor(boxes, dtype=torch.float32).reshape(-1, 4)
        classes = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
        if boxes.shape[0] != classes.shape[0]:
            raise ValidationError(f"image {img_idx}: {boxes.shape[0]} boxes but {classes.shape[0]} labels")
        for (x1, y1, x2, y2), cls in zip(boxes.tolist(), classes.tolist()):
            j0 = max(0, min(int(x1 * w), w - 1))
            i0 = max(0, min(int(y1 * h), h - 1))
            j1 = min(w, max(j0 + 1, int(-(-x2 * w // 1))))  # ceil, at least one cell
            i1 = min(h, max(i0 + 1, int(-(-y2 * h // 1))))
            vectors.append(features[img_idx, :, i0:i1, j0:j1].mean(dim=(1, 2)))
            labels.append(cls)
    if not vectors:
        return ClassFeatureSet({}, total_count=0, feature_dim=dim)
    return _bucket(torch.stack(vectors), torch.tensor(labels), num_classes)


def class_centers(feature_set: ClassFeatureSet) -> ClassCenters:
    """Per-class arithmetic mean of the bucketed vectors."""
    nonempty = {k: v for k, v in feature_set.per_class.items() if v.shape[0] > 0}
    if not nonempty:
        raise EmptyClassSetError("all classes are empty; cannot compute centers")
    centers = {k: v.mean(dim=0) for k, v in nonempty.items()}
    counts = {k: int(v.shape[0]) for k, v in nonempty.items()}
    return ClassCenters(centers, counts)

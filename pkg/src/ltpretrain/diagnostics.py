"""Post-training analysis: IoU, the five-way error taxonomy, a frozen-feature
linear probe with per-frequency-group accuracy, and classifier weight norms."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Annotation, BoundingBox, DatasetManifest, compute_class_stats
from .models import roi_pool
from .views import to_tensor

GROUPS = ("rare", "common", "frequent")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


class ErrorCategory(str, enum.Enum):
    CORRECT = "Correct"
    LOCATION = "LocationError"
    BACKGROUND = "BackgroundError"
    CLASSIFICATION = "ClassificationError"
    OTHER = "Other"


@dataclass(frozen=True)
class Prediction:
    image_id: int
    box: BoundingBox
    class_id: int
    score: float

    def to_json(self) -> str:
        return json.dumps(
            {"image_id": self.image_id, "box": list(self.box.as_tuple()), "class_id": self.class_id, "score": self.score}
        )

    @classmethod
    def from_json(cls, line: str) -> "Prediction":
        d = json.loads(line)
        return cls(int(d["image_id"]), BoundingBox(*d["box"]), int(d["class_id"]), float(d["score"]))


def categorize_iou(class_match: bool, overlap: float, upper: float = 0.5, lower: float = 0.1) -> ErrorCategory:
    """Boundary values go to the higher band: IoU == 0.5 counts as >= 0.5."""
    if overlap < lower:
        return ErrorCategory.BACKGROUND
    if class_match:
        return ErrorCategory.CORRECT if overlap >= upper else ErrorCategory.LOCATION
    return ErrorCategory.CLASSIFICATION if overlap >= upper else ErrorCategory.OTHER


def categorize(pred: Prediction, gt: Sequence[Annotation]) -> ErrorCategory:
    """Match against the max-IoU ground-truth box (lowest index on ties)."""
    if not gt:
        return ErrorCategory.BACKGROUND
    overlaps = [iou(pred.box, a.box) for a in gt]
    best = int(np.argmax(overlaps))  # argmax returns the first maximum
    return categorize_iou(gt[best].category_id == pred.class_id, overlaps[best])


def frequency_groups(instance_counts: Sequence[int], rare_max: int = 10, common_max: int = 100) -> dict[int, str]:
    """Class -> group by training instance count; classes with no instances are left out."""
    out = {}
    for c, n in enumerate(instance_counts):
        if n == 0:
            continue
        out[c] = "rare" if n <= rare_max else "common" if n <= common_max else "frequent"
    return out


@dataclass
class ErrorBreakdown:
    counts: dict = field(default_factory=lambda: {g: Counter() for g in GROUPS})

    def add(self, group: str, category: ErrorCategory):
        self.counts[group][category.value] += 1

    def to_dict(self) -> dict:
        return {g: {c.value: int(self.counts[g][c.value]) for c in ErrorCategory} for g in GROUPS}


def top_n_per_category(predictions: Sequence[Prediction], n: int = 100) -> list[Prediction]:
    by_class: dict[int, list[Prediction]] = {}
    for p in predictions:
        by_class.setdefault(p.class_id, []).append(p)
    out = []
    for c in sorted(by_class):
        out.extend(sorted(by_class[c], key=lambda p: -p.score)[:n])
    return out


def analyze_errors(
    predictions: Sequence[Prediction], manifest: DatasetManifest, groups: dict[int, str], top_n: int = 100
) -> ErrorBreakdown:
    """Error categories of the top-N predictions per class, grouped by the
    predicted class's frequency group. Predictions of ungrouped classes are skipped."""
    report = ErrorBreakdown()
    for p in top_n_per_category(predictions, top_n):
        group = groups.get(p.class_id)
        if group is None:
            continue
        report.add(group, categorize(p, manifest.get(p.image_id).annotations))
    return report


# ---------------------------------------------------------------------------
# Weight norms
# ---------------------------------------------------------------------------


@dataclass
class WeightNormReport:
    norms: np.ndarray  # per class, in class-id order
    order: list  # class ids sorted by descending frequency
    group_means: dict

    def head_tail_gap(self) -> float:
        """Mean norm of frequent classes minus mean norm of rare classes."""
        return float(self.group_means["frequent"] - self.group_means["rare"])

    def to_csv(self) -> str:
        rows = ["rank,class_id,norm"]
        rows += [f"{r},{c},{float(self.norms[c])!r}" for r, c in enumerate(self.order)]
        return "\n".join(rows) + "\n"


def weight_norm_report(weights, class_counts: Sequence[int], groups: Optional[dict[int, str]] = None) -> WeightNormReport:
    w = np.asarray(weights.detach().cpu() if isinstance(weights, torch.Tensor) else weights, dtype=np.float64)
    norms = np.sqrt((w * w).sum(axis=1))
    counts = np.asarray(class_counts)
    order = sorted(range(len(norms)), key=lambda c: (-counts[c], c))
    means = {}
    if groups is not None:
        for g in GROUPS:
            members = [c for c, gg in groups.items() if gg == g]
            means[g] = float(norms[members].mean()) if members else float("nan")
    return WeightNormReport(norms, order, means)


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 1e-3
    seed: int = 0
    rare_max: int = 10
    common_max: int = 100
    batch_images: int = 64


@dataclass
class ProbeResult:
    per_class_accuracy: dict
    group_accuracy: dict  # absent groups are missing, not zero
    overall_accuracy: float
    classifier_weight: torch.Tensor
    groups: dict

    def to_dict(self) -> dict:
        return {
            "per_class_accuracy": {str(k): v for k, v in self.per_class_accuracy.items()},
            "group_accuracy": self.group_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "groups": {str(k): v for k, v in self.groups.items()},
        }


@torch.no_grad()
def box_features(encoder, manifest: DatasetManifest, batch_images: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Frozen features of every ground-truth box: the box-averaged activations of
    each backbone stage, concatenated. ``encoder`` is a :class:`Backbone` or any
    callable mapping an N x 3 x H x W batch to a list of feature maps."""
    feats, labels = [], []
    was_training = getattr(encoder, "training", False)
    if hasattr(encoder, "eval"):
        encoder.eval()
    try:
        for s in range(0, len(manifest), batch_images):
            ims = manifest.images[s : s + batch_images]
            x = torch.stack([to_tensor(im.pixels) for im in ims])
            out = encoder(x)
            maps = out.stage_features if hasattr(out, "stage_features") else out
            boxes = [[a.box for a in im.annotations] for im in ims]
            per_stage = []
            for fmap in maps:
                stride = x.shape[-1] / fmap.shape[-1]
                per_stage.append(roi_pool(fmap, boxes, stride, 1).flatten(1))
            feats.append(torch.cat(per_stage, dim=1))
            labels.extend(a.category_id for im in ims for a in im.annotations)
    finally:
        if was_training:
            encoder.train()
    return torch.cat(feats).double(), torch.tensor(labels, dtype=torch.long)


def fit_linear_probe(
    x: torch.Tensor, y: torch.Tensor, num_classes: int, config: ProbeConfig = ProbeConfig()
) -> tuple[torch.nn.Linear, torch.Tensor, torch.Tensor]:
    """Full-batch Adam on standardized features; returns (classifier, mean, std)."""
    mean, std = x.mean(0), x.std(0).clamp_min(1e-6)
    xs = (x - mean) / std
    g = torch.Generator().manual_seed(config.seed)
    clf = torch.nn.Linear(x.shape[1], num_classes).double()
    with torch.no_grad():
        clf.weight.normal_(0.0, 0.01, generator=g)
        clf.bias.zero_()
    opt = torch.optim.Adam(clf.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    for _ in range(config.epochs):
        opt.zero_grad()
        F.cross_entropy(clf(xs), y).backward()
        opt.step()
    return clf, mean, std


def probe_eval_features(
    x_tr: torch.Tensor,
    y_tr: torch.Tensor,
    x_te: torch.Tensor,
    y_te: torch.Tensor,
    num_classes: int,
    class_counts: Sequence[int],
    config: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    groups = frequency_groups(class_counts, config.rare_max, config.common_max)
    clf, mean, std = fit_linear_probe(x_tr, y_tr, num_classes, config)
    with torch.no_grad():
        pred = clf((x_te - mean) / std).argmax(1)
    correct = (pred == y_te).numpy()
    labels = y_te.numpy()
    per_class = {int(c): float(correct[labels == c].mean()) for c in np.unique(labels)}
    group_acc = {}
    for g in GROUPS:
        members = [per_class[c] for c in per_class if groups.get(c) == g]
        if members:
            group_acc[g] = float(np.mean(members))
    return ProbeResult(per_class, group_acc, float(correct.mean()), clf.weight.detach().clone(), groups)


def probe_eval(
    encoder,
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    config: ProbeConfig = ProbeConfig(),
    class_counts: Optional[Sequence[int]] = None,
) -> ProbeResult:
    """Linear classification probe on frozen ground-truth box features.

    ``class_counts`` (e.g. pre-training instance counts) defines the frequency
    groups; by default the probe training split's counts are used. Group
    accuracy is the mean of per-class accuracies; overall accuracy is per box.
    """
    if class_counts is None:
        class_counts = compute_class_stats(train_manifest).instance_counts
    x_tr, y_tr = box_features(encoder, train_manifest, config.batch_images)
    x_te, y_te = box_features(encoder, test_manifest, config.batch_images)
    return probe_eval_features(x_tr, y_tr, x_te, y_te, train_manifest.num_classes, class_counts, config)


def save_probe(result: ProbeResult, class_counts: Sequence[int], directory) -> Path:
    from .checkpoint import save_checkpoint

    directory = Path(directory)
    meta = {"class_counts": [int(c) for c in class_counts], **result.to_dict()}
    save_checkpoint(directory, {"classifier.weight": result.classifier_weight}, meta=meta)
    return directory

"""Segmentation metrics and feature visualization.

mIoU convention: a frame's mean is taken over the classes present in its
ground truth, excluding background (class 0). Frames whose ground truth
contains only background carry no signal and are excluded from the dataset
mean. A vacuous class (absent from both prediction and ground truth) scores
IoU 1.0 by convention, which only matters for explicitly requested classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import netpbm
from .errors import ContractViolation, ShapeError

__all__ = [
    "iou_class",
    "miou_frame",
    "miou_dataset",
    "last_k_average",
    "EvalReport",
    "eval_report",
    "viz_features",
]

MIOU_CONVENTION = "mean over ground-truth-present classes, background excluded"


def iou_class(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} does not match ground truth {gt.shape}")
    p = pred == class_id
    g = gt == class_id
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def _present_classes(gt: np.ndarray, class_count: int) -> list[int]:
    present = np.unique(gt)
    if present[0] < 0 or present[-1] >= class_count:
        raise ValueError(
            f"ground truth labels must lie in [0, {class_count}), got [{present[0]}, {present[-1]}]"
        )
    return [int(c) for c in present if c != 0]


def miou_frame(pred: np.ndarray, gt: np.ndarray, class_count: int) -> float | None:
    """Mean IoU over ground-truth-present non-background classes.

    Returns None for frames whose ground truth is all background; dataset
    aggregation skips those.
    """
    present = _present_classes(gt, class_count)
    if not present:
        return None
    return float(np.mean([iou_class(pred, gt, c) for c in present]))


def miou_dataset(frames: Iterable[tuple[np.ndarray, np.ndarray]], class_count: int) -> float:
    """Unweighted mean of per-frame mIoU; all-background frames are skipped."""
    values = []
    for pred, gt in frames:
        v = miou_frame(pred, gt, class_count)
        if v is not None:
            values.append(v)
    if not values:
        raise ContractViolation("no frame had a foreground class to score")
    return float(np.mean(values))


def last_k_average(values: list[float], k: int) -> float:
    if k < 1:
        raise ContractViolation(f"k must be >= 1, got {k}")
    if len(values) < k:
        raise ContractViolation(f"need at least {k} values, got {len(values)}")
    return float(np.mean(values[-k:]))


@dataclass
class EvalReport:
    convention: str
    class_count: int
    frame_count: int
    scored_frame_count: int
    dataset_miou: float
    per_frame: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "convention": self.convention,
            "class_count": self.class_count,
            "frame_count": self.frame_count,
            "scored_frame_count": self.scored_frame_count,
            "dataset_miou": self.dataset_miou,
            "per_frame": self.per_frame,
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def eval_report(
    frames: Iterable[tuple[str, np.ndarray, np.ndarray]], class_count: int
) -> EvalReport:
    """Builds the full per-frame report from (name, prediction, gt) triples."""
    per_frame = []
    scored = []
    total = 0
    for name, pred, gt in frames:
        total += 1
        present = _present_classes(gt, class_count)
        ious = {str(c): iou_class(pred, gt, c) for c in present}
        miou = float(np.mean(list(ious.values()))) if present else None
        if miou is not None:
            scored.append(miou)
        per_frame.append({"frame": name, "per_class_iou": ious, "miou": miou})
    if not scored:
        raise ContractViolation("no frame had a foreground class to score")
    return EvalReport(
        convention=MIOU_CONVENTION,
        class_count=class_count,
        frame_count=total,
        scored_frame_count=len(scored),
        dataset_miou=float(np.mean(scored)),
        per_frame=per_frame,
    )


def viz_features(dense: np.ndarray, out_path) -> dict:
    """Writes a (3, H, W) feature map as a PPM, min-max scaled per channel.

    Scaling maps each channel's range onto [0, 255] with round-half-up;
    constant channels become 0 and are noted in the PPM comment and the
    returned metadata.
    """
    arr = np.asarray(dense, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(
            f"visualization needs exactly 3 channels, got {arr.shape}; "
            "pick 3 channels of the feature map first"
        )
    out = np.zeros(arr.shape, dtype=np.uint8)
    constant = []
    for ch in range(3):
        lo = arr[ch].min()
        hi = arr[ch].max()
        if hi == lo:
            constant.append(ch)
            continue
        scaled = (arr[ch] - lo) / (hi - lo) * 255.0
        out[ch] = np.floor(scaled + 0.5).astype(np.uint8)
    comment = f"constant channels: {','.join(map(str, constant))}" if constant else None
    netpbm.write_ppm(out_path, out.transpose(1, 2, 0), comment=comment)
    return {"constant_channels": constant}

"""Grounding metrics: phrase-level region ranking, Recall@k, pointing.

A phrase scores each region by the maximum attention weight any of its
tokens assigns to that region; regions are ranked by that score with ties
going to the lower region index. Recall@k counts a phrase as hit when any
top-k box overlaps a ground-truth box at IoU >= 0.5. Pointing accuracy
drops the top-1 box's center and counts it when it lands inside a
ground-truth box (boundary inclusive).

Everything here is a pure function of an eval-mode model and immutable
data; no call mutates model state.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import (
    CaptionTokens,
    GroundingModel,
    RegionSet,
    compatibility_batch,
    set_model_mode,
)
from .data import Dataset, GroundingExample, Phrase
from .errors import ShapeError

IOU_THRESHOLD = 0.5
DEFAULT_KS = (1, 5, 10)


@dataclass
class PhrasePrediction:
    span: tuple[int, int]
    region_order: np.ndarray   # region indices, best first
    scores: np.ndarray         # matching scores, non-increasing
    box: np.ndarray            # top-1 region's box
    point: tuple[float, float]  # center of the selected box


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    pointing_accuracy: float
    phrase_count: int
    phrases_without_gt: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
                "pointing_accuracy": self.pointing_accuracy,
                "phrase_count": self.phrase_count,
                "phrases_without_gt": self.phrases_without_gt,
            }
        )


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a == 0.0 or area_b == 0.0:
        warnings.warn("IoU of a degenerate (zero-area) box is 0", RuntimeWarning)
        return 0.0
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def phrase_region_scores(
    model: GroundingModel,
    regions: RegionSet,
    caption: CaptionTokens,
    span: tuple[int, int],
) -> np.ndarray:
    """Per-region score: max attention weight over the phrase's tokens."""
    start, end = span
    if not (0 <= start < end <= len(caption)):
        raise ShapeError(f"span {span} invalid for caption of length {len(caption)}")
    weights = compatibility_batch(model, regions, caption).weights
    return weights[:, start:end].max(axis=1)


def _rank(scores: np.ndarray) -> np.ndarray:
    # Stable sort on the negated scores keeps lower indices first on ties.
    return np.argsort(-scores, kind="stable")


def predict_phrases(model: GroundingModel, example: GroundingExample) -> list[PhrasePrediction]:
    """Rank regions for every annotated phrase of one example (eval mode)."""
    eval_model = set_model_mode(model, "eval")
    weights = compatibility_batch(eval_model, example.regions, example.caption).weights
    predictions = []
    for phrase in example.phrases:
        start, end = phrase.span
        scores = weights[:, start:end].max(axis=1)
        order = _rank(scores)
        box = example.regions.boxes[order[0]]
        point = (float(box[0] + box[2]) / 2.0, float(box[1] + box[3]) / 2.0)
        predictions.append(
            PhrasePrediction(
                span=phrase.span,
                region_order=order,
                scores=scores[order],
                box=box,
                point=point,
            )
        )
    return predictions


def _has_gt(phrase: Phrase) -> bool:
    return phrase.boxes.shape[0] > 0


def recall_at_k(
    predictions: Sequence[PhrasePrediction],
    ground_truth: Sequence[Phrase],
    ks: Sequence[int],
    boxes_by_prediction: Sequence[np.ndarray] | None = None,
) -> dict[int, float]:
    """Fraction of phrases whose truth overlaps a top-k box at IoU >= 0.5.

    ``boxes_by_prediction`` supplies each prediction's per-region box table;
    when omitted the ranked boxes are reconstructed from the stored top-1
    box only for k = 1. A phrase with several ground-truth boxes counts as
    hit if any of them is matched.
    """
    if not ks:
        raise ShapeError("ks must be non-empty")
    if len(predictions) != len(ground_truth):
        raise ShapeError("predictions and ground truth must align")
    hits = {k: 0 for k in ks}
    counted = 0
    for idx, (pred, phrase) in enumerate(zip(predictions, ground_truth)):
        if not _has_gt(phrase):
            continue
        counted += 1
        if boxes_by_prediction is not None:
            ranked_boxes = np.asarray(boxes_by_prediction[idx])[pred.region_order]
        else:
            ranked_boxes = pred.box[None, :]
        overlaps = np.array(
            [
                max(iou(box, gt) for gt in phrase.boxes)
                for box in ranked_boxes
            ]
        )
        for k in ks:
            if np.any(overlaps[:k] >= IOU_THRESHOLD):
                hits[k] += 1
    if counted == 0:
        return {k: 0.0 for k in ks}
    return {k: hits[k] / counted for k in ks}


def point_in_box(point: tuple[float, float], box: Sequence[float]) -> bool:
    """Inclusive containment: a point on the box edge counts as inside."""
    x, y = point
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def pointing_accuracy(
    predictions: Sequence[PhrasePrediction], ground_truth: Sequence[Phrase]
) -> float:
    """Fraction of phrases whose predicted point hits a ground-truth box."""
    if len(predictions) != len(ground_truth):
        raise ShapeError("predictions and ground truth must align")
    hits = counted = 0
    for pred, phrase in zip(predictions, ground_truth):
        if not _has_gt(phrase):
            continue
        counted += 1
        if any(point_in_box(pred.point, box) for box in phrase.boxes):
            hits += 1
    return hits / counted if counted else 0.0


def evaluate_model(
    model: GroundingModel, dataset: Dataset, ks: Sequence[int] = DEFAULT_KS
) -> EvalReport:
    """Full evaluation over a dataset's annotated phrases."""
    all_predictions: list[PhrasePrediction] = []
    all_phrases: list[Phrase] = []
    all_boxes: list[np.ndarray] = []
    without_gt = 0
    for ex in dataset.examples:
        predictions = predict_phrases(model, ex)
        for pred, phrase in zip(predictions, ex.phrases):
            if not _has_gt(phrase):
                without_gt += 1
                continue
            all_predictions.append(pred)
            all_phrases.append(phrase)
            all_boxes.append(ex.regions.boxes)
    recall = recall_at_k(all_predictions, all_phrases, ks, boxes_by_prediction=all_boxes)
    pointing = pointing_accuracy(all_predictions, all_phrases)
    return EvalReport(
        recall_at=recall,
        pointing_accuracy=pointing,
        phrase_count=len(all_predictions),
        phrases_without_gt=without_gt,
    )


def append_report_csv(path: str | Path, epoch: int | float, report: EvalReport) -> None:
    """Append one row of (epoch, recall@1, recall@5, recall@10, pointing)."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(
                ["epoch", "recall_at_1", "recall_at_5", "recall_at_10", "pointing_accuracy"]
            )
        writer.writerow(
            [
                epoch,
                repr(report.recall_at.get(1, 0.0)),
                repr(report.recall_at.get(5, 0.0)),
                repr(report.recall_at.get(10, 0.0)),
                repr(report.pointing_accuracy),
            ]
        )

"""Input validation helpers used by the data types and the estimator."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError

POS_LABELS = ("noun", "adjective", "other")


def as_float_matrix(arr, name: str, cols: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array and check its width."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={out.ndim}")
    if cols is not None and out.shape[1] != cols:
        raise ShapeError(f"{name} must have {cols} columns, got {out.shape[1]}")
    return out


def as_float_vector(arr, name: str, length: int | None = None) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got ndim={out.ndim}")
    if length is not None and out.shape[0] != length:
        raise ShapeError(f"{name} must have length {length}, got {out.shape[0]}")
    return out


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite entries")
    return arr


def check_boxes(boxes: np.ndarray, name: str = "boxes") -> np.ndarray:
    """Validate (m, 4) boxes as (x1, y1, x2, y2) with positive extent."""
    boxes = as_float_matrix(boxes, name, cols=4)
    check_finite(boxes, name)
    bad = np.nonzero((boxes[:, 0] >= boxes[:, 2]) | (boxes[:, 1] >= boxes[:, 3]))[0]
    if bad.size:
        raise ShapeError(f"{name}[{bad[0]}] is malformed (needs x1 < x2 and y1 < y2)")
    return boxes


def check_pos_labels(pos: Sequence[str], n_tokens: int) -> list[str]:
    pos = list(pos)
    if len(pos) != n_tokens:
        raise ShapeError(f"pos mask length {len(pos)} != token count {n_tokens}")
    for i, label in enumerate(pos):
        if label not in POS_LABELS:
            raise ShapeError(f"pos[{i}] = {label!r} not in {POS_LABELS}")
    return pos

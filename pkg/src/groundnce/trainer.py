"""Training loop: optimization, early stopping, checkpointing, run logs.

Every eval_every steps the model is scored on the validation set; the
checkpoint with the best validation pointing accuracy is kept (earliest
step wins ties) and training stops once `patience` evaluations pass
without improvement. Each evaluation row also records the per-word
mutual-information bound measured on the validation set, which is what
lets the bound-versus-accuracy trend be read off a finished run.

All randomness flows from one seed through named substreams (init,
shuffle, noun-choice), so ablations perturb exactly one stream at a time.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .attention import (
    GroundingModel,
    init_grounding_model,
    model_from_state_tensors,
    model_state_tensors,
    model_trainable,
    model_with_trainable,
    set_model_mode,
)
from .checkpoint import save_tensors
from .data import Dataset, batch_iterator
from .errors import NumericError, ShapeError
from .evaluate import DEFAULT_KS, EvalReport, evaluate_model
from .losses import LangSelection, TrainBatch, infonce_img, total_loss
from .nn import adam_init, adam_step, update_running_stats
from .rng import substream

RUNLOG_COLUMNS = (
    "step",
    "mi_bound_per_word",
    "val_recall_at_1",
    "val_recall_at_5",
    "val_recall_at_10",
    "val_pointing_accuracy",
    "train_l_img",
    "train_l_lang",
    "train_total",
)


@dataclass
class TrainConfig:
    batch_size: int = 50
    learning_rate: float = 1e-5
    max_epochs: int = 30
    eval_every: int = 100
    patience: int = 5
    seed: int = 0
    enable_l_lang: bool = True
    loss_reduction: str = "mean"   # "mean" or "sum" over counted tokens
    norm_mode: str = "batch"       # "batch" or "affine"
    d_r: int | None = None         # None: taken from the dataset
    d_w: int | None = None
    d: int | None = None           # None: d_w // 2
    n_cand: int = 30
    n_keep: int = 25
    allow_missing_negatives: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ShapeError("batch_size must be at least 2")
        if self.learning_rate < 0:
            raise ShapeError("learning_rate must be non-negative")
        if self.n_keep > self.n_cand:
            raise ShapeError("n_keep cannot exceed n_cand")
        if self.loss_reduction not in ("mean", "sum"):
            raise ShapeError("loss_reduction must be 'mean' or 'sum'")
        if self.norm_mode not in nn.NORM_MODES:
            raise ShapeError(f"norm_mode must be one of {nn.NORM_MODES}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ShapeError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class RunLogRow:
    step: int
    mi_bound_per_word: float
    val_recall_at_1: float
    val_recall_at_5: float
    val_recall_at_10: float
    val_pointing_accuracy: float
    train_l_img: float
    train_l_lang: float
    train_total: float


@dataclass
class TrainResult:
    model: GroundingModel          # best checkpoint, eval mode
    best_step: int
    best_accuracy: float
    run_log: list[RunLogRow]
    steps_done: int
    stopped_early: bool


def write_runlog(path: str | Path, rows: Sequence[RunLogRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RUNLOG_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.step]
                + [repr(getattr(row, col)) for col in RUNLOG_COLUMNS[1:]]
            )


def read_runlog(path: str | Path) -> list[RunLogRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                RunLogRow(
                    step=int(record["step"]),
                    **{col: float(record[col]) for col in RUNLOG_COLUMNS[1:]},
                )
            )
    return rows


def validation_bound(model: GroundingModel, dataset: Dataset, batch_size: int, seed: int) -> float:
    """Word-weighted mean of log(k) - loss over validation batches."""
    eval_model = set_model_mode(model, "eval")
    bound_sum = 0.0
    words_total = 0
    for batch in batch_iterator(dataset, batch_size, seed, epoch=0):
        result = infonce_img(eval_model, batch)
        if result.words_counted == 0:
            continue
        bound = math.log(batch.size) - result.value
        bound_sum += bound * result.words_counted
        words_total += result.words_counted
    return bound_sum / words_total if words_total else math.nan


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average with a growing window at the start."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    for i in range(len(values)):
        out[i] = values[max(0, i - window + 1) : i + 1].mean()
    return out


def bound_accuracy_pattern(rows: Sequence[RunLogRow], window: int = 5) -> dict:
    """Smoothed bound/accuracy relation over a finished run.

    Checks that the peak of smoothed accuracy happens no later than the
    final evaluation and that the smoothed bound at the end is at least its
    value at the accuracy peak (the bound keeps improving even after
    grounding accuracy has peaked).
    """
    if not rows:
        raise ShapeError("run log is empty")
    bound = moving_average([r.mi_bound_per_word for r in rows], window)
    acc = moving_average([r.val_pointing_accuracy for r in rows], window)
    peak_idx = int(np.argmax(acc))
    return {
        "peak_accuracy_step": rows[peak_idx].step,
        "final_step": rows[-1].step,
        "smoothed_bound_at_peak": float(bound[peak_idx]),
        "smoothed_bound_at_final": float(bound[-1]),
        "ok": rows[peak_idx].step <= rows[-1].step
        and bound[-1] >= bound[peak_idx],
    }


def _resolve_dims(config: TrainConfig, dataset: Dataset) -> tuple[int, int, int]:
    d_r = config.d_r if config.d_r is not None else dataset.d_r
    d_w = config.d_w if config.d_w is not None else dataset.d_w
    if d_r != dataset.d_r or d_w != dataset.d_w:
        raise ShapeError(
            f"config dims ({d_r}, {d_w}) do not match dataset dims "
            f"({dataset.d_r}, {dataset.d_w})"
        )
    d = config.d if config.d is not None else max(1, d_w // 2)
    return d_r, d_w, d


def _apply_running_stats(model: GroundingModel, stats: dict) -> GroundingModel:
    maps = {}
    for name in ("k_r", "v_r", "q_w", "v_w"):
        params = getattr(model, name)
        if name in stats:
            mean, var, count = stats[name]
            params = update_running_stats(params, mean, var, count)
        maps[name] = params
    return GroundingModel(d=model.d, **maps)


def _batch_first_layer_stats(model: GroundingModel, batch: TrainBatch, selections) -> dict:
    """Batch mean/var of each map's pre-normalization activations."""
    regions = np.concatenate([r.features for r, _ in batch.examples])
    words = [c.features for _, c in batch.examples]
    for sel in selections or []:
        if sel is not None:
            words.append(sel.features)
    words = np.concatenate(words)
    out = {}
    for name, rows in (("k_r", regions), ("v_r", regions), ("q_w", words), ("v_w", words)):
        params = getattr(model, name)
        h = rows @ params.w1 + params.b1
        out[name] = (h.mean(axis=0), h.var(axis=0), rows.shape[0])
    return out


def train(
    config: TrainConfig,
    train_dataset: Dataset,
    val_dataset: Dataset,
    negative_provider=None,
    out_dir: str | Path | None = None,
    ks: Sequence[int] = DEFAULT_KS,
) -> TrainResult:
    """Optimize the grounding model with early stopping on pointing accuracy.

    ``negative_provider`` must expose ``select(caption, rng)`` returning a
    LangSelection or None; it is only consulted when the language loss is
    enabled. A non-finite loss aborts with a diagnostic dump, leaving the
    last-good checkpoint on disk.
    """
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_config.json").write_text(config.to_json(), encoding="utf-8")
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(
                ["step", "l_img", "l_lang", "total", "mi_bound_per_word", "wall_ms"]
            )

    d_r, d_w, d = _resolve_dims(config, train_dataset)
    model = init_grounding_model(
        d_r, d_w, d, substream(config.seed, "init"), norm_mode=config.norm_mode
    )
    opt_state = adam_init(model_trainable(model), config.learning_rate)
    noun_rng = substream(config.seed, "noun-choice")
    use_lang = config.enable_l_lang and negative_provider is not None

    rows: list[RunLogRow] = []
    best_accuracy = -math.inf
    best_step = -1
    best_state: dict | None = None
    evals_without_improvement = 0
    step = 0
    last_eval_step = -1
    last_report = None
    stop = False

    def run_eval() -> None:
        nonlocal best_accuracy, best_step, best_state, evals_without_improvement
        nonlocal last_eval_step, stop
        eval_model = set_model_mode(model, "eval")
        report: EvalReport = evaluate_model(eval_model, val_dataset, ks)
        bound = validation_bound(eval_model, val_dataset, config.batch_size, config.seed)
        rows.append(
            RunLogRow(
                step=step,
                mi_bound_per_word=bound,
                val_recall_at_1=report.recall_at.get(1, 0.0),
                val_recall_at_5=report.recall_at.get(5, 0.0),
                val_recall_at_10=report.recall_at.get(10, 0.0),
                val_pointing_accuracy=report.pointing_accuracy,
                train_l_img=last_report.l_img if last_report else math.nan,
                train_l_lang=last_report.l_lang if last_report else math.nan,
                train_total=last_report.total if last_report else math.nan,
            )
        )
        last_eval_step = step
        if report.pointing_accuracy > best_accuracy:
            best_accuracy = report.pointing_accuracy
            best_step = step
            best_state = model_state_tensors(model)
            evals_without_improvement = 0
            if out_dir is not None:
                save_tensors(out_dir / "best.igck", best_state)
        else:
            evals_without_improvement += 1
            if evals_without_improvement >= config.patience:
                stop = True

    for epoch in range(config.max_epochs):
        for batch in batch_iterator(train_dataset, config.batch_size, config.seed, epoch):
            selections: list[LangSelection | None] | None = None
            if use_lang:
                selections = [
                    negative_provider.select(caption, noun_rng)
                    for _, caption in batch.examples
                ]
            t0 = time.perf_counter()
            try:
                report, grads = total_loss(
                    model, batch, selections, reduction=config.loss_reduction
                )
            except NumericError:
                if out_dir is not None:
                    diag = {
                        "step": step,
                        "image_ids": [r.image_id for r, _ in batch.examples],
                        "note": "non-finite loss; last-good checkpoint left intact",
                    }
                    (out_dir / "abort_diagnostics.json").write_text(
                        json.dumps(diag, indent=2), encoding="utf-8"
                    )
                raise
            last_report = report
            if config.norm_mode == "batch":
                stats = _batch_first_layer_stats(model, batch, selections)
            tree, opt_state = adam_step(model_trainable(model), grads, opt_state)
            model = model_with_trainable(model, tree)
            if config.norm_mode == "batch":
                model = _apply_running_stats(model, stats)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            step += 1
            if out_dir is not None:
                with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
                    csv.writer(fh).writerow(
                        [
                            step,
                            repr(report.l_img),
                            repr(report.l_lang),
                            repr(report.total),
                            repr(report.mi_bound_per_word),
                            f"{wall_ms:.3f}",
                        ]
                    )
            if step % config.eval_every == 0:
                run_eval()
            if stop:
                break
        if stop:
            break

    if step != last_eval_step:
        run_eval()

    if out_dir is not None:
        write_runlog(out_dir / "runlog.csv", rows)
    if best_state is None:
        raise NumericError("training produced no evaluation")
    return TrainResult(
        model=model_from_state_tensors(best_state, mode="eval"),
        best_step=best_step,
        best_accuracy=best_accuracy,
        run_log=rows,
        steps_done=step,
        stopped_early=stop,
    )

"""Scikit-learn style front door for the whole pipeline.

``GroundingEstimator`` wraps training behind fit/predict/score so the
model slots into the usual tooling (``get_params``/``set_params``,
``clone``, grid search over the hyperparameters). ``X`` is a
:class:`~groundnce.data.Dataset`; prediction returns per-phrase region
rankings and ``score`` reports validation-style pointing accuracy.
"""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import Dataset, GroundingExample
from .errors import ShapeError
from .evaluate import DEFAULT_KS, EvalReport, PhrasePrediction, evaluate_model, predict_phrases
from .trainer import TrainConfig, TrainResult, train


class GroundingEstimator(BaseEstimator):
    """Weakly supervised phrase grounder with an estimator interface.

    Parameters mirror :class:`~groundnce.trainer.TrainConfig`. Fitted state
    lives in trailing-underscore attributes: ``model_`` (best checkpoint),
    ``run_log_``, ``best_step_``, ``best_accuracy_``.
    """

    def __init__(
        self,
        batch_size: int = 50,
        learning_rate: float = 1e-5,
        max_epochs: int = 30,
        eval_every: int = 100,
        patience: int = 5,
        seed: int = 0,
        enable_l_lang: bool = True,
        loss_reduction: str = "mean",
        norm_mode: str = "batch",
        d_r: int | None = None,
        d_w: int | None = None,
        d: int | None = None,
        n_cand: int = 30,
        n_keep: int = 25,
        allow_missing_negatives: bool = False,
    ) -> None:
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.eval_every = eval_every
        self.patience = patience
        self.seed = seed
        self.enable_l_lang = enable_l_lang
        self.loss_reduction = loss_reduction
        self.norm_mode = norm_mode
        self.d_r = d_r
        self.d_w = d_w
        self.d = d
        self.n_cand = n_cand
        self.n_keep = n_keep
        self.allow_missing_negatives = allow_missing_negatives

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X: Dataset, y=None, *, val: Dataset | None = None,
            negatives=None, out_dir=None) -> "GroundingEstimator":
        """Train on dataset ``X``; ``val`` defaults to ``X`` when omitted.

        ``negatives`` is a provider with ``select(caption, rng)`` (see
        negcap.CachedNegatives / RandomCaptionNegatives), required only when
        the language loss is enabled.
        """
        if not isinstance(X, Dataset):
            raise ShapeError("X must be a groundnce Dataset")
        result: TrainResult = train(
            self._config(),
            X,
            val if val is not None else X,
            negative_provider=negatives,
            out_dir=out_dir,
        )
        self.model_ = result.model
        self.run_log_ = result.run_log
        self.best_step_ = result.best_step
        self.best_accuracy_ = result.best_accuracy
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "This GroundingEstimator instance is not fitted yet; call fit first."
            )

    def predict(
        self, X: Dataset | GroundingExample | Sequence[GroundingExample]
    ) -> list[list[PhrasePrediction]]:
        """Ranked region predictions per annotated phrase, per example."""
        self._check_fitted()
        if isinstance(X, Dataset):
            examples = X.examples
        elif isinstance(X, GroundingExample):
            examples = [X]
        else:
            examples = list(X)
        return [predict_phrases(self.model_, ex) for ex in examples]

    def evaluate(self, X: Dataset, ks: Sequence[int] = DEFAULT_KS) -> EvalReport:
        self._check_fitted()
        return evaluate_model(self.model_, X, ks)

    def score(self, X: Dataset, y=None) -> float:
        """Pointing accuracy on ``X`` (higher is better)."""
        return self.evaluate(X).pointing_accuracy

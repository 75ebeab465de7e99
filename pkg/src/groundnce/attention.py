"""Word-region attention and the region-set/word compatibility score.

A word's query is compared against region keys, the softmax over regions
mixes region values into an attended visual vector, and the compatibility
is that vector's dot product with the word's own value vector:

    s_i    = q(w) . k(r_i) / sqrt(d)
    a_i    = softmax_i(s)
    v_att  = sum_i a_i * v(r_i)
    phi    = v(w) . v_att

Attention always runs per word over regions, never the other way around:
captions describe only part of an image, so many regions legitimately
match no word.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .errors import ShapeError
from .nn import MlpParams, ParamTree, init_mlp, mlp_backward, mlp_forward
from .validation import as_float_matrix, check_boxes, check_finite, check_pos_labels

DEFAULT_MAX_REGIONS = 30

# Additive mask for padded region slots; exp(MASKED_SCORE - max) underflows
# to exactly zero, so masked regions never leak into the mixture.
MASKED_SCORE = -1e30

MAP_NAMES = ("k_r", "v_r", "q_w", "v_w")


@dataclass
class RegionSet:
    """Bag of detected regions for one image: boxes plus feature rows."""

    image_id: str
    boxes: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        self.boxes = check_boxes(self.boxes)
        self.features = check_finite(as_float_matrix(self.features, "region features"), "region features")
        if self.boxes.shape[0] == 0:
            raise ShapeError(f"{self.image_id}: region set is empty")
        if self.features.shape[0] != self.boxes.shape[0]:
            raise ShapeError(
                f"{self.image_id}: {self.features.shape[0]} feature rows for {self.boxes.shape[0]} boxes"
            )

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


@dataclass
class CaptionTokens:
    """Tokenized caption with per-token contextual features and POS flags."""

    tokens: list[str]
    features: np.ndarray
    pos_mask: list[str]
    noun_indices: list[int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.features = check_finite(as_float_matrix(self.features, "word features"), "word features")
        if self.features.shape[0] != len(self.tokens):
            raise ShapeError(
                f"{self.features.shape[0]} feature rows for {len(self.tokens)} tokens"
            )
        self.pos_mask = check_pos_labels(self.pos_mask, len(self.tokens))
        nouns = [i for i, p in enumerate(self.pos_mask) if p == "noun"]
        if self.noun_indices is None:
            self.noun_indices = nouns
        elif not set(self.noun_indices) <= set(nouns):
            raise ShapeError("noun_indices must all be flagged noun in pos_mask")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def counted_indices(self) -> list[int]:
        """Token positions that participate in the contrastive losses."""
        return [i for i, p in enumerate(self.pos_mask) if p in ("noun", "adjective")]


@dataclass
class GroundingModel:
    """The four learnable maps plus the shared embedding width d."""

    k_r: MlpParams
    v_r: MlpParams
    q_w: MlpParams
    v_w: MlpParams
    d: int

    def __post_init__(self) -> None:
        for name in MAP_NAMES:
            params = getattr(self, name)
            if params.out_dim != self.d:
                raise ShapeError(f"{name} output dim {params.out_dim} != d = {self.d}")
        if self.k_r.in_dim != self.v_r.in_dim:
            raise ShapeError("k_r and v_r must share the region input dim")
        if self.q_w.in_dim != self.v_w.in_dim:
            raise ShapeError("q_w and v_w must share the word input dim")

    @property
    def d_r(self) -> int:
        return self.k_r.in_dim

    @property
    def d_w(self) -> int:
        return self.q_w.in_dim


def init_grounding_model(
    d_r: int,
    d_w: int,
    d: int | None,
    rng: np.random.Generator,
    norm_mode: str = "batch",
    mode: str = "train",
) -> GroundingModel:
    """Fresh model; ``d`` defaults to half the word feature width."""
    if d is None:
        d = max(1, d_w // 2)
    return GroundingModel(
        k_r=init_mlp(d_r, d, rng, norm_mode, mode),
        v_r=init_mlp(d_r, d, rng, norm_mode, mode),
        q_w=init_mlp(d_w, d, rng, norm_mode, mode),
        v_w=init_mlp(d_w, d, rng, norm_mode, mode),
        d=d,
    )


def set_model_mode(model: GroundingModel, mode: str) -> GroundingModel:
    return GroundingModel(
        k_r=replace(model.k_r, mode=mode),
        v_r=replace(model.v_r, mode=mode),
        q_w=replace(model.q_w, mode=mode),
        v_w=replace(model.v_w, mode=mode),
        d=model.d,
    )


def model_trainable(model: GroundingModel) -> ParamTree:
    """All trainable tensors keyed as ``<map>.<field>``."""
    tree: ParamTree = {}
    for name in MAP_NAMES:
        nn.add_trees(tree, nn.trainable(getattr(model, name)), prefix=f"{name}.")
    return tree


def model_with_trainable(model: GroundingModel, tree: ParamTree) -> GroundingModel:
    maps = {}
    for name in MAP_NAMES:
        sub = {k.split(".", 1)[1]: v for k, v in tree.items() if k.startswith(name + ".")}
        maps[name] = nn.with_trainable(getattr(model, name), sub)
    return GroundingModel(d=model.d, **maps)


def model_state_tensors(model: GroundingModel) -> ParamTree:
    """Checkpoint payload: trainable tensors, running stats, and norm flag."""
    tree = model_trainable(model)
    for name in MAP_NAMES:
        params = getattr(model, name)
        tree[f"{name}.norm_running_mean"] = params.norm_running_mean
        tree[f"{name}.norm_running_var"] = params.norm_running_var
    tree["meta.norm_mode"] = np.array([float(nn.NORM_MODES.index(model.k_r.norm_mode))])
    return tree


def model_from_state_tensors(tensors: ParamTree, mode: str = "eval") -> GroundingModel:
    norm_mode = nn.NORM_MODES[int(tensors["meta.norm_mode"][0])]
    maps = {}
    for name in MAP_NAMES:
        fields = {
            key.split(".", 1)[1]: tensors[key]
            for key in tensors
            if key.startswith(name + ".")
        }
        maps[name] = MlpParams(mode=mode, norm_mode=norm_mode, **fields)
    return GroundingModel(d=maps["k_r"].out_dim, **maps)


@dataclass
class AttentionResult:
    """Per-word attention over regions plus the compatibility readout."""

    scores: np.ndarray    # (m, n)
    weights: np.ndarray   # (m, n), columns sum to 1
    attended: np.ndarray  # (n, d)
    compat: np.ndarray    # (n,)


def attention_scores(
    model: GroundingModel, regions: RegionSet, word_feature: np.ndarray
) -> np.ndarray:
    """Scaled dot-product scores of one word's query against all region keys."""
    word_feature = np.asarray(word_feature, dtype=np.float64)
    if word_feature.shape != (model.d_w,):
        raise ShapeError(f"word feature must have shape ({model.d_w},)")
    keys, _ = mlp_forward(model.k_r, regions.features)
    query, _ = mlp_forward(model.q_w, word_feature[None, :])
    return (keys @ query[0]) / math.sqrt(model.d)


def attend(scores: np.ndarray) -> np.ndarray:
    """Softmax over regions, stabilized by max subtraction."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ShapeError("scores must be a non-empty vector")
    check_finite(scores, "scores")
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def compatibility_batch(
    model: GroundingModel, regions: RegionSet, caption: CaptionTokens
) -> AttentionResult:
    """Attention and compatibility for every word of the caption at once."""
    keys, _ = mlp_forward(model.k_r, regions.features)
    values, _ = mlp_forward(model.v_r, regions.features)
    queries, _ = mlp_forward(model.q_w, caption.features)
    word_values, _ = mlp_forward(model.v_w, caption.features)
    scores = (keys @ queries.T) / math.sqrt(model.d)        # (m, n)
    shifted = np.exp(scores - scores.max(axis=0, keepdims=True))
    weights = shifted / shifted.sum(axis=0, keepdims=True)
    attended = weights.T @ values                            # (n, d)
    compat = np.einsum("nd,nd->n", attended, word_values)
    return AttentionResult(scores=scores, weights=weights, attended=attended, compat=compat)


def compatibility(
    model: GroundingModel, regions: RegionSet, caption: CaptionTokens, word_index: int
) -> float:
    """Compatibility between the region set and one word of the caption."""
    if not 0 <= word_index < len(caption):
        raise ShapeError(f"word index {word_index} out of range for {len(caption)} tokens")
    return float(compatibility_batch(model, regions, caption).compat[word_index])


def compatibility_backward(
    model: GroundingModel,
    regions: RegionSet,
    caption: CaptionTokens,
    grad_compat: np.ndarray,
) -> ParamTree:
    """Gradients of sum_j grad_compat[j] * phi_j with respect to all four maps."""
    grad_compat = np.asarray(grad_compat, dtype=np.float64)
    if grad_compat.shape != (len(caption),):
        raise ShapeError(f"grad_compat must have shape ({len(caption)},)")

    keys, cache_k = mlp_forward(model.k_r, regions.features)
    values, cache_v = mlp_forward(model.v_r, regions.features)
    queries, cache_q = mlp_forward(model.q_w, caption.features)
    word_values, cache_u = mlp_forward(model.v_w, caption.features)

    scale = 1.0 / math.sqrt(model.d)
    scores = (keys @ queries.T) * scale
    shifted = np.exp(scores - scores.max(axis=0, keepdims=True))
    weights = shifted / shifted.sum(axis=0, keepdims=True)    # (m, n)
    attended = weights.T @ values                             # (n, d)

    g = grad_compat[:, None]
    grad_u = g * attended                                     # d phi / d v_w outputs
    grad_att = g * word_values                                # (n, d)
    grad_v = weights @ grad_att                               # (m, d)
    grad_weights = values @ grad_att.T                        # (m, n)
    # Softmax Jacobian, column by column over regions.
    inner = (weights * grad_weights).sum(axis=0, keepdims=True)
    grad_scores = weights * (grad_weights - inner)
    grad_q = (grad_scores.T @ keys) * scale                   # (n, d)
    grad_k = (grad_scores @ queries) * scale                  # (m, d)

    tree: ParamTree = {}
    nn.add_trees(tree, mlp_backward(model.k_r, cache_k, grad_k)[0], prefix="k_r.")
    nn.add_trees(tree, mlp_backward(model.v_r, cache_v, grad_v)[0], prefix="v_r.")
    nn.add_trees(tree, mlp_backward(model.q_w, cache_q, grad_q)[0], prefix="q_w.")
    nn.add_trees(tree, mlp_backward(model.v_w, cache_u, grad_u)[0], prefix="v_w.")
    return tree


def dump_attention(
    path: str | Path,
    model: GroundingModel,
    examples: Iterable[tuple[RegionSet, CaptionTokens]],
    limit: int | None = None,
) -> int:
    """Write per-token attention weights as JSON lines for inspection.

    Each (image, token) group is emitted with its regions sorted by weight
    descending. Returns the number of lines written.
    """
    eval_model = set_model_mode(model, "eval")
    written = 0
    with open(path, "w", encoding="utf-8") as fh:
        for idx, (regions, caption) in enumerate(examples):
            if limit is not None and idx >= limit:
                break
            result = compatibility_batch(eval_model, regions, caption)
            for j, token in enumerate(caption.tokens):
                order = np.argsort(-result.weights[:, j], kind="stable")
                for i in order:
                    record = {
                        "image_id": regions.image_id,
                        "token": token,
                        "region_index": int(i),
                        "box": [float(v) for v in regions.boxes[i]],
                        "weight": float(result.weights[i, j]),
                    }
                    fh.write(json.dumps(record) + "\n")
                    written += 1
    return written

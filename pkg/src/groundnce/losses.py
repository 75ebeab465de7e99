"""Contrastive objectives and the mutual-information readout.

Two InfoNCE-style losses train the compatibility function:

* the image loss contrasts each counted caption word against the same word
  paired with every other image in the batch (in-batch negatives), and
* the language loss contrasts one noun of the caption against the same
  image paired with substituted negative words.

``log(k) - loss`` turns the image loss into a per-word lower bound on the
mutual information between region sets and word representations. The
language loss deliberately oversamples related negative words, so no such
bound is claimed for it anywhere in this package.

An exact mutual-information evaluator over small discrete joints and a
batch sampler for the bound make the estimator testable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .attention import CaptionTokens, GroundingModel, MASKED_SCORE, RegionSet
from .errors import NumericError, ShapeError
from .nn import ParamTree, mlp_backward, mlp_forward
from .validation import as_float_matrix


@dataclass
class TrainBatch:
    """Paired (regions, caption) examples; all pairs are true pairs."""

    examples: list[tuple[RegionSet, CaptionTokens]]

    def __post_init__(self) -> None:
        if not self.examples:
            raise ShapeError("batch must contain at least one example")

    @property
    def size(self) -> int:
        return len(self.examples)


@dataclass
class LangSelection:
    """One drawn noun and its negative word features for the language loss."""

    noun_index: int
    words: list[str]
    features: np.ndarray  # (n_negatives, d_w)

    def __post_init__(self) -> None:
        self.features = as_float_matrix(self.features, "negative features")
        if self.features.shape[0] == 0:
            raise ShapeError("selection must carry at least one negative")


@dataclass
class LossReport:
    l_img: float
    l_lang: float
    total: float
    mi_bound_per_word: float
    words_counted: int
    lang_counted: int = 0


@dataclass
class ImgLoss:
    """Image-negative loss value plus the per-pair compatibility table."""

    value: float
    words_counted: int
    phi: np.ndarray           # (k, k, n_max): image a x caption b x token j
    counted_mask: np.ndarray  # (k, n_max) bool


# ---------------------------------------------------------------------------
# Batched forward over one TrainBatch.
#
# All regions in the batch pass through the region maps as one flattened
# matrix, and all caption tokens plus all negative words pass through the
# word maps as one flattened matrix. With batch normalization in train mode
# this makes the statistics span the whole mini-batch; in affine or eval
# mode the flattening is exactly equivalent to per-example calls.
# ---------------------------------------------------------------------------


@dataclass
class _Packed:
    model: GroundingModel
    batch: TrainBatch
    selections: list[LangSelection | None]
    m: np.ndarray
    n: np.ndarray
    keys: np.ndarray          # (k, m_max, d)
    values: np.ndarray
    region_mask: np.ndarray   # (k, m_max) bool
    queries: np.ndarray       # (k, n_max, d)
    word_values: np.ndarray
    counted_mask: np.ndarray  # (k, n_max) bool
    neg_queries: list[np.ndarray | None]
    neg_values: list[np.ndarray | None]
    caches: dict
    n_caption_rows: int
    attn: np.ndarray | None = None   # (k, k, m_max, n_max)
    phi: np.ndarray | None = None    # (k, k, n_max)


def _pack_forward(
    model: GroundingModel,
    batch: TrainBatch,
    selections: Sequence[LangSelection | None] | None,
) -> _Packed:
    k = batch.size
    if selections is None:
        selections = [None] * k
    if len(selections) != k:
        raise ShapeError("one selection (or None) required per example")

    m = np.array([regions.count for regions, _ in batch.examples])
    n = np.array([len(caption) for _, caption in batch.examples])
    region_rows = np.concatenate([regions.features for regions, _ in batch.examples])
    word_blocks = [caption.features for _, caption in batch.examples]
    n_caption_rows = int(n.sum())
    for sel in selections:
        if sel is not None:
            word_blocks.append(sel.features)
    word_rows = np.concatenate(word_blocks)

    keys_flat, cache_k = mlp_forward(model.k_r, region_rows)
    values_flat, cache_v = mlp_forward(model.v_r, region_rows)
    queries_flat, cache_q = mlp_forward(model.q_w, word_rows)
    word_values_flat, cache_u = mlp_forward(model.v_w, word_rows)

    d = model.d
    m_max = int(m.max())
    n_max = int(n.max())
    keys = np.zeros((k, m_max, d))
    values = np.zeros((k, m_max, d))
    region_mask = np.zeros((k, m_max), dtype=bool)
    queries = np.zeros((k, n_max, d))
    word_values = np.zeros((k, n_max, d))
    counted_mask = np.zeros((k, n_max), dtype=bool)

    r_off = w_off = 0
    for e, (regions, caption) in enumerate(batch.examples):
        keys[e, : m[e]] = keys_flat[r_off : r_off + m[e]]
        values[e, : m[e]] = values_flat[r_off : r_off + m[e]]
        region_mask[e, : m[e]] = True
        r_off += m[e]
        queries[e, : n[e]] = queries_flat[w_off : w_off + n[e]]
        word_values[e, : n[e]] = word_values_flat[w_off : w_off + n[e]]
        counted_mask[e, caption.counted_indices] = True
        w_off += n[e]

    neg_queries: list[np.ndarray | None] = []
    neg_values: list[np.ndarray | None] = []
    for sel in selections:
        if sel is None:
            neg_queries.append(None)
            neg_values.append(None)
        else:
            rows = sel.features.shape[0]
            neg_queries.append(queries_flat[w_off : w_off + rows])
            neg_values.append(word_values_flat[w_off : w_off + rows])
            w_off += rows

    packed = _Packed(
        model=model,
        batch=batch,
        selections=list(selections),
        m=m,
        n=n,
        keys=keys,
        values=values,
        region_mask=region_mask,
        queries=queries,
        word_values=word_values,
        counted_mask=counted_mask,
        neg_queries=neg_queries,
        neg_values=neg_values,
        caches={"k_r": cache_k, "v_r": cache_v, "q_w": cache_q, "v_w": cache_u},
        n_caption_rows=n_caption_rows,
    )

    scale = 1.0 / math.sqrt(d)
    scores = np.einsum("aid,bjd->abij", keys, queries, optimize=True) * scale
    scores = np.where(region_mask[:, None, :, None], scores, MASKED_SCORE)
    shifted = np.exp(scores - scores.max(axis=2, keepdims=True))
    attn = shifted / shifted.sum(axis=2, keepdims=True)
    attended = np.einsum("abij,aid->abjd", attn, values, optimize=True)
    packed.attn = attn
    packed.phi = np.einsum("abjd,bjd->abj", attended, word_values, optimize=True)
    return packed


def _img_loss(packed: _Packed, reduction: str) -> tuple[float, float, int]:
    """Returns (reduced loss, token-sum loss, counted token count)."""
    k = packed.batch.size
    phi = packed.phi
    top = phi.max(axis=0)
    lse = np.log(np.exp(phi - top).sum(axis=0)) + top          # (k, n_max)
    pos = phi[np.arange(k), np.arange(k)]                      # (k, n_max)
    per_token = np.where(packed.counted_mask, lse - pos, 0.0)
    l_sum = float(per_token.sum())
    words = int(packed.counted_mask.sum())
    if words == 0:
        return 0.0, 0.0, 0
    if reduction == "mean":
        return l_sum / words, l_sum, words
    if reduction == "sum":
        return l_sum / k, l_sum, words
    raise ShapeError(f"unknown reduction {reduction!r}")


def _img_phi_grad(packed: _Packed, scale: float) -> np.ndarray:
    """d(image loss) / d(phi table), already scaled by the reduction."""
    k = packed.batch.size
    top = packed.phi.max(axis=0, keepdims=True)
    ex = np.exp(packed.phi - top)
    soft = ex / ex.sum(axis=0, keepdims=True)                  # (k, k, n_max)
    g = soft * packed.counted_mask[None, :, :]
    g[np.arange(k), np.arange(k)] -= packed.counted_mask
    return g * scale


@dataclass
class _LangGrads:
    grad_phi: np.ndarray
    grad_nq: list[np.ndarray | None]
    grad_nu: list[np.ndarray | None]
    grad_keys: np.ndarray | None
    grad_values: np.ndarray | None


def _lang_loss_and_grads(packed: _Packed) -> tuple[float, int, _LangGrads]:
    """Language loss plus gradients into the pair table, negatives, regions."""
    k = packed.batch.size
    scale = 1.0 / math.sqrt(packed.model.d)
    counted = [e for e in range(k) if packed.selections[e] is not None]
    grads = _LangGrads(
        grad_phi=np.zeros_like(packed.phi),
        grad_nq=[None] * k,
        grad_nu=[None] * k,
        grad_keys=None,
        grad_values=None,
    )
    if not counted:
        return 0.0, 0, grads
    grads.grad_keys = np.zeros_like(packed.keys)
    grads.grad_values = np.zeros_like(packed.values)

    total = 0.0
    w = 1.0 / len(counted)
    for e in counted:
        sel = packed.selections[e]
        m_e = packed.m[e]
        keys = packed.keys[e, :m_e]
        values = packed.values[e, :m_e]
        nq = packed.neg_queries[e]
        nu = packed.neg_values[e]
        s = (keys @ nq.T) * scale                              # (m_e, L)
        sh = np.exp(s - s.max(axis=0, keepdims=True))
        a = sh / sh.sum(axis=0, keepdims=True)
        v_att = a.T @ values                                   # (L, d)
        phi_neg = np.einsum("ld,ld->l", v_att, nu)
        phi_pos = packed.phi[e, e, sel.noun_index]
        logits = np.concatenate([[phi_pos], phi_neg])
        top = logits.max()
        lse = math.log(np.exp(logits - top).sum()) + top
        total += lse - phi_pos

        # Softmax over the contrast set, then back through the attention.
        p = np.exp(logits - lse)
        grads.grad_phi[e, e, sel.noun_index] += (p[0] - 1.0) * w
        g_neg = p[1:] * w                                      # (L,)
        g_vatt = g_neg[:, None] * nu                           # (L, d)
        grads.grad_nu[e] = g_neg[:, None] * v_att
        grads.grad_values[e, :m_e] += a @ g_vatt               # (m_e, d)
        grad_a = values @ g_vatt.T                             # (m_e, L)
        inner = (a * grad_a).sum(axis=0, keepdims=True)
        grad_s = a * (grad_a - inner)
        grads.grad_nq[e] = (grad_s.T @ keys) * scale
        grads.grad_keys[e, :m_e] += (grad_s @ nq) * scale

    return total / len(counted), len(counted), grads


def _backward(packed: _Packed, grad_phi: np.ndarray, lang: _LangGrads) -> ParamTree:
    model = packed.model
    scale = 1.0 / math.sqrt(model.d)
    attn = packed.attn

    grad_u_pad = np.einsum("abj,abjd->bjd", grad_phi, np.einsum(
        "abij,aid->abjd", attn, packed.values, optimize=True), optimize=True)
    grad_att = np.einsum("abj,bjd->abjd", grad_phi, packed.word_values, optimize=True)
    grad_values_pad = np.einsum("abij,abjd->aid", attn, grad_att, optimize=True)
    grad_a = np.einsum("abjd,aid->abij", grad_att, packed.values, optimize=True)
    inner = np.einsum("abij,abij->abj", attn, grad_a, optimize=True)
    grad_s = attn * (grad_a - inner[:, :, None, :])
    grad_q_pad = np.einsum("abij,aid->bjd", grad_s, packed.keys, optimize=True) * scale
    grad_keys_pad = np.einsum("abij,bjd->aid", grad_s, packed.queries, optimize=True) * scale

    if lang.grad_keys is not None:
        grad_keys_pad = grad_keys_pad + lang.grad_keys
        grad_values_pad = grad_values_pad + lang.grad_values

    # Unpad back to the flattened row layout of the forward pass.
    k = packed.batch.size
    grad_k_flat = np.concatenate([grad_keys_pad[e, : packed.m[e]] for e in range(k)])
    grad_v_flat = np.concatenate([grad_values_pad[e, : packed.m[e]] for e in range(k)])
    q_blocks = [grad_q_pad[e, : packed.n[e]] for e in range(k)]
    u_blocks = [grad_u_pad[e, : packed.n[e]] for e in range(k)]
    for e in range(k):
        if packed.selections[e] is not None:
            q_blocks.append(lang.grad_nq[e])
            u_blocks.append(lang.grad_nu[e])
    grad_q_flat = np.concatenate(q_blocks)
    grad_u_flat = np.concatenate(u_blocks)

    tree: ParamTree = {}
    nn.add_trees(tree, mlp_backward(model.k_r, packed.caches["k_r"], grad_k_flat)[0], "k_r.")
    nn.add_trees(tree, mlp_backward(model.v_r, packed.caches["v_r"], grad_v_flat)[0], "v_r.")
    nn.add_trees(tree, mlp_backward(model.q_w, packed.caches["q_w"], grad_q_flat)[0], "q_w.")
    nn.add_trees(tree, mlp_backward(model.v_w, packed.caches["v_w"], grad_u_flat)[0], "v_w.")
    return tree


def infonce_img(
    model: GroundingModel, batch: TrainBatch, reduction: str = "mean"
) -> ImgLoss:
    """Image-negative InfoNCE loss over counted (noun/adjective) tokens.

    Every example serves once as the positive with the other k-1 images as
    negatives. Captions without counted tokens contribute nothing but stay
    in the batch as negatives for the others.
    """
    if batch.size < 2:
        raise ShapeError("image loss needs a batch of at least 2 examples")
    packed = _pack_forward(model, batch, None)
    value, _, words = _img_loss(packed, reduction)
    return ImgLoss(
        value=value,
        words_counted=words,
        phi=packed.phi,
        counted_mask=packed.counted_mask,
    )


def _negative_features(negatives) -> np.ndarray | None:
    if negatives is None:
        return None
    if hasattr(negatives, "negatives"):
        rows = [neg.feature for neg in negatives.negatives]
        if not rows:
            return None
        return np.stack([np.asarray(r, dtype=np.float64) for r in rows])
    feats = as_float_matrix(negatives, "negative features")
    return feats if feats.shape[0] else None


def infonce_lang(
    model: GroundingModel,
    regions: RegionSet,
    caption: CaptionTokens,
    chosen_noun: int,
    negatives,
) -> float | None:
    """Language-negative loss for one example, or None when skipped.

    ``negatives`` is a NegativeCaptionSet or an (L, d_w) feature matrix.
    Captions with no nouns or an empty negative set are skipped.
    """
    if not caption.noun_indices:
        return None
    if chosen_noun not in caption.noun_indices:
        raise ShapeError(f"chosen noun {chosen_noun} is not a noun position")
    feats = _negative_features(negatives)
    if feats is None:
        return None
    sel = LangSelection(noun_index=chosen_noun, words=[], features=feats)
    packed = _pack_forward(model, TrainBatch([(regions, caption)]), [sel])
    value, _, _ = _lang_loss_and_grads(packed)
    return float(value)


def total_loss(
    model: GroundingModel,
    batch: TrainBatch,
    selections: Sequence[LangSelection | None] | None = None,
    reduction: str = "mean",
) -> tuple[LossReport, ParamTree]:
    """Combined loss over one batch with analytic parameter gradients.

    ``selections`` carries the per-example noun draw and negative word
    features for the language loss; pass None (or per-example Nones) to
    train with image negatives only. The noun draw happens upstream so the
    loss stays a deterministic function of its arguments.
    """
    if batch.size < 2:
        raise ShapeError("image loss needs a batch of at least 2 examples")
    packed = _pack_forward(model, batch, selections)
    l_img, l_sum, words = _img_loss(packed, reduction)
    img_scale = 0.0 if words == 0 else (1.0 / words if reduction == "mean" else 1.0 / batch.size)
    grad_phi = _img_phi_grad(packed, img_scale)
    l_lang, lang_counted, lang = _lang_loss_and_grads(packed)
    grad_phi += lang.grad_phi
    grads = _backward(packed, grad_phi, lang)

    bound = math.log(batch.size) - l_sum / words if words else math.nan
    report = LossReport(
        l_img=l_img,
        l_lang=l_lang,
        total=l_img + l_lang,
        mi_bound_per_word=bound,
        words_counted=words,
        lang_counted=lang_counted,
    )
    if not (math.isfinite(report.l_img) and math.isfinite(report.l_lang)):
        raise NumericError(f"non-finite loss: l_img={report.l_img}, l_lang={report.l_lang}")
    return report, grads


def batch_norm_stats(model: GroundingModel, batch: TrainBatch,
                     selections: Sequence[LangSelection | None] | None = None):
    """Batch statistics of the four maps for running-average updates."""
    packed = _pack_forward(model, batch, selections)
    out = {}
    for name, cache in packed.caches.items():
        if cache.batch_mean is not None:
            out[name] = (cache.batch_mean, cache.batch_var, cache.x.shape[0])
    return out


def mi_lower_bound(l_value: float, k: int) -> float:
    """Per-word bound: log(k) minus the contrastive loss."""
    if k < 1:
        raise ShapeError("k must be at least 1")
    return math.log(k) - l_value


@dataclass
class DiscreteJoint:
    """Explicit joint distribution over a small discrete product space."""

    probabilities: np.ndarray

    def __post_init__(self) -> None:
        self.probabilities = as_float_matrix(self.probabilities, "joint probabilities")
        if np.any(self.probabilities < 0):
            raise ShapeError("joint probabilities must be non-negative")
        total = float(self.probabilities.sum())
        if abs(total - 1.0) > 1e-12:
            raise ShapeError(f"joint probabilities sum to {total}, not 1")


def exact_mi(joint: DiscreteJoint) -> float:
    """Exact mutual information of a discrete joint, in nats (0 log 0 = 0)."""
    p = joint.probabilities
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mask = p > 0
    outer = np.outer(px, py)
    return float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))


def sample_infonce_bound(
    joint: DiscreteJoint,
    critic: np.ndarray,
    k: int,
    n_batches: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-batch bound samples log(k) - L_k for a fixed critic table.

    Each batch holds one positive pair drawn from the joint and k-1
    negatives whose x is redrawn from the marginal. The mean over batches
    estimates a quantity that never exceeds the exact MI, whatever the
    critic.
    """
    if k < 1:
        raise ShapeError("k must be at least 1")
    p = joint.probabilities
    critic = np.asarray(critic, dtype=np.float64)
    if critic.shape != p.shape:
        raise ShapeError("critic table must match the joint's shape")
    flat = p.reshape(-1)
    pos = rng.choice(flat.size, size=n_batches, p=flat)
    xi, yi = np.unravel_index(pos, p.shape)
    neg_x = rng.choice(p.shape[0], size=(n_batches, k - 1), p=p.sum(axis=1))
    phi_pos = critic[xi, yi]
    logits = np.concatenate([phi_pos[:, None], critic[neg_x, yi[:, None]]], axis=1)
    top = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - top).sum(axis=1)) + top[:, 0]
    return math.log(k) - (lse - phi_pos)

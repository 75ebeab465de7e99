"""Dense numerical kernel: 1-hidden-layer MLPs with analytic gradients.

Every feature map in the grounding model is the same block: linear,
normalization, ReLU, linear. The hidden layer always has as many units as
the input. Normalization is either real batch normalization (train mode
uses batch statistics, eval mode uses running statistics) or a plain
per-feature affine, selected by ``norm_mode``; the affine variant keeps
per-example gradients independent, which finite-difference suites rely on.

All arithmetic is float64. Forward passes never mutate parameters; running
statistics are folded in explicitly via :func:`update_running_stats`, and
:func:`adam_step` returns fresh values, so parameter objects can be shared
freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import CacheError, DegenerateBatchError, NumericError, ShapeError

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1

NORM_MODES = ("batch", "affine")
MODES = ("train", "eval")

# Parameter fields that receive gradients (running stats are buffers).
TRAINABLE_FIELDS = ("w1", "b1", "norm_gain", "norm_bias", "w2", "b2")

ParamTree = dict[str, np.ndarray]


@dataclass
class MlpParams:
    """Weights of one feature map. Treated as an immutable value."""

    w1: np.ndarray
    b1: np.ndarray
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    norm_running_mean: np.ndarray
    norm_running_var: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mode: str = "train"
    norm_mode: str = "batch"

    def __post_init__(self) -> None:
        in_dim, hidden = self.w1.shape
        if hidden != in_dim:
            raise ShapeError(f"hidden dim {hidden} must equal input dim {in_dim}")
        if self.w2.shape[0] != hidden:
            raise ShapeError("w2 rows must match hidden dim")
        for name in ("b1", "norm_gain", "norm_bias", "norm_running_mean", "norm_running_var"):
            if getattr(self, name).shape != (hidden,):
                raise ShapeError(f"{name} must have shape ({hidden},)")
        if self.b2.shape != (self.w2.shape[1],):
            raise ShapeError("b2 must match w2 output dim")
        if np.any(self.norm_running_var <= 0):
            raise ShapeError("norm_running_var entries must be positive")
        if self.mode not in MODES:
            raise ShapeError(f"mode must be one of {MODES}")
        if self.norm_mode not in NORM_MODES:
            raise ShapeError(f"norm_mode must be one of {NORM_MODES}")

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


@dataclass
class ForwardCache:
    """Intermediates of one forward call, consumed by :func:`mlp_backward`."""

    source: MlpParams
    x: np.ndarray
    xhat: np.ndarray          # normalized (or raw, in affine mode) pre-activation
    pre_relu: np.ndarray
    hidden: np.ndarray        # post-ReLU activations
    inv_std: np.ndarray | None
    batch_mean: np.ndarray | None
    batch_var: np.ndarray | None


def init_mlp(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    norm_mode: str = "batch",
    mode: str = "train",
) -> MlpParams:
    """Glorot-uniform weights, zero biases, identity normalization."""

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    hidden = in_dim
    return MlpParams(
        w1=glorot(in_dim, hidden),
        b1=np.zeros(hidden),
        norm_gain=np.ones(hidden),
        norm_bias=np.zeros(hidden),
        norm_running_mean=np.zeros(hidden),
        norm_running_var=np.ones(hidden),
        w2=glorot(hidden, out_dim),
        b2=np.zeros(out_dim),
        mode=mode,
        norm_mode=norm_mode,
    )


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass over a (batch, in_dim) matrix.

    Eval mode is a pure function of (params, x); train mode with batch
    normalization additionally depends on the batch composition and
    requires batch size >= 2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(
            f"input must be (batch, {params.in_dim}), got {x.shape}"
        )
    h = x @ params.w1 + params.b1
    inv_std = batch_mean = batch_var = None
    if params.norm_mode == "affine":
        xhat = h
    elif params.mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError(
                "train-mode batch statistics need batch size >= 2"
            )
        batch_mean = h.mean(axis=0)
        batch_var = h.var(axis=0)
        inv_std = 1.0 / np.sqrt(batch_var + NORM_EPS)
        xhat = (h - batch_mean) * inv_std
    else:
        inv_std = 1.0 / np.sqrt(params.norm_running_var + NORM_EPS)
        xhat = (h - params.norm_running_mean) * inv_std
    pre_relu = params.norm_gain * xhat + params.norm_bias
    hidden = np.maximum(pre_relu, 0.0)
    y = hidden @ params.w2 + params.b2
    cache = ForwardCache(
        source=params,
        x=x,
        xhat=xhat,
        pre_relu=pre_relu,
        hidden=hidden,
        inv_std=inv_std,
        batch_mean=batch_mean,
        batch_var=batch_var,
    )
    return y, cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, grad_y: np.ndarray
) -> tuple[ParamTree, np.ndarray]:
    """Exact gradients of the forward map for cotangent ``grad_y``.

    Returns (parameter gradients keyed by TRAINABLE_FIELDS, gradient with
    respect to the input rows).
    """
    if cache.source is not params:
        raise CacheError("cache was produced by a different parameter value")
    grad_y = np.asarray(grad_y, dtype=np.float64)
    n = cache.x.shape[0]
    if grad_y.shape != (n, params.out_dim):
        raise ShapeError(
            f"grad_y must be ({n}, {params.out_dim}), got {grad_y.shape}"
        )

    grad_w2 = cache.hidden.T @ grad_y
    grad_b2 = grad_y.sum(axis=0)
    grad_hidden = grad_y @ params.w2.T
    grad_pre = grad_hidden * (cache.pre_relu > 0)

    grad_gain = (grad_pre * cache.xhat).sum(axis=0)
    grad_bias = grad_pre.sum(axis=0)
    grad_xhat = grad_pre * params.norm_gain

    if params.norm_mode == "affine":
        grad_h = grad_xhat
    elif params.mode == "train":
        # Batch statistics couple the rows; fold their dependence back in.
        s1 = grad_xhat.sum(axis=0)
        s2 = (grad_xhat * cache.xhat).sum(axis=0)
        grad_h = (cache.inv_std / n) * (n * grad_xhat - s1 - cache.xhat * s2)
    else:
        grad_h = grad_xhat * cache.inv_std

    grad_b1 = grad_h.sum(axis=0)
    grad_w1 = cache.x.T @ grad_h
    grad_x = grad_h @ params.w1.T
    grads = {
        "w1": grad_w1,
        "b1": grad_b1,
        "norm_gain": grad_gain,
        "norm_bias": grad_bias,
        "w2": grad_w2,
        "b2": grad_b2,
    }
    return grads, grad_x


def update_running_stats(
    params: MlpParams,
    batch_mean: np.ndarray,
    batch_var: np.ndarray,
    batch_count: int,
    momentum: float = NORM_MOMENTUM,
) -> MlpParams:
    """Blend batch statistics into the running buffers (returns new params).

    The running variance uses the unbiased estimator, matching the usual
    batch-norm convention; normalization itself stays biased.
    """
    if batch_count < 2:
        raise DegenerateBatchError("running stats need batch size >= 2")
    unbiased = batch_var * (batch_count / (batch_count - 1))
    return replace(
        params,
        norm_running_mean=(1 - momentum) * params.norm_running_mean + momentum * batch_mean,
        norm_running_var=(1 - momentum) * params.norm_running_var + momentum * unbiased,
    )


def trainable(params: MlpParams) -> ParamTree:
    return {name: getattr(params, name) for name in TRAINABLE_FIELDS}


def with_trainable(params: MlpParams, tree: Mapping[str, np.ndarray]) -> MlpParams:
    return replace(params, **{name: np.asarray(tree[name], dtype=np.float64) for name in TRAINABLE_FIELDS})


def zero_grads_like(tree: Mapping[str, np.ndarray]) -> ParamTree:
    return {name: np.zeros_like(arr) for name, arr in tree.items()}


def add_trees(into: ParamTree, other: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Accumulate ``other`` into ``into`` in place, optionally prefixing keys."""
    for name, arr in other.items():
        key = prefix + name
        if key in into:
            into[key] = into[key] + arr
        else:
            into[key] = np.array(arr, dtype=np.float64)


@dataclass
class AdamState:
    """Optimizer state for one parameter tree."""

    step: int
    m: ParamTree
    v: ParamTree
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], learning_rate: float) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        learning_rate=learning_rate,
    )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[ParamTree, AdamState]:
    """One bias-corrected Adam update. Returns (new params, new state)."""
    if set(params) != set(state.m):
        raise ShapeError("params do not match optimizer state")
    t = state.step + 1
    new_params: ParamTree = {}
    new_m: ParamTree = {}
    new_v: ParamTree = {}
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad {name} has shape {g.shape}, expected {p.shape}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * (g * g)
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_params[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def finite_diff_grad(
    loss_fn: Callable[[ParamTree], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> ParamTree:
    """Central-difference gradient estimate of ``loss_fn`` per parameter entry.

    ``loss_fn`` must be deterministic. Used as the independent oracle for
    every analytic backward pass in the package.
    """
    if eps <= 0:
        raise ShapeError("eps must be positive")
    work = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    grads: ParamTree = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn(work))
            flat[i] = orig - eps
            lo = float(loss_fn(work))
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"loss not finite while probing {name}[{i}]")
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(
    analytic: Mapping[str, np.ndarray],
    numeric: Mapping[str, np.ndarray],
    noise_floor: float = 1e-9,
) -> float:
    """Worst per-entry relative disagreement between two gradient trees.

    A central difference at eps 1e-5 in float64 carries ~1e-11 absolute
    roundoff noise, so entries agreeing within ``noise_floor`` count as
    matching outright; a pure ratio there would only amplify oracle noise,
    not measure gradient error. Everything else is compared relatively.
    """
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        f = np.asarray(numeric[name], dtype=np.float64).reshape(-1)
        if a.shape != f.shape:
            raise ShapeError(f"gradient {name} shapes differ")
        diff = np.abs(a - f)
        scale = np.maximum(np.abs(a), np.abs(f))
        live = diff > noise_floor
        if np.any(live):
            worst = max(worst, float(np.max(diff[live] / scale[live])))
    return worst

"""Flat-parameter differentiable classifiers with analytic gradients.

Four model kinds share one interface: a plain linear softmax classifier,
a one-hidden-layer ReLU network, an adapter composite (frozen backbone,
trainable linear head on the backbone's penultimate representation), and
a soft-prompt wrapper (a trainable vector appended to every input row,
everything else frozen). Parameters live in a flat float64 vector whose
layout names each tensor segment; gradients of frozen segments are
exactly zero, and SGD never writes to them.

The fused loss/gradient kernels come from `fedsim.kernels` (compiled
when available). Forward scoring, prediction, and the finite-difference
oracle are plain NumPy and never call the fused backward path, so the
gradient check stays an independent route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .params import Layout, ParameterError, ParameterVector


class ModelError(ValueError):
    """Raised for invalid model specs, shapes, or batches."""


@dataclass(frozen=True)
class Logistic:
    d: int
    classes: int


@dataclass(frozen=True)
class Mlp:
    d: int
    hidden: int
    classes: int


@dataclass(frozen=True)
class AdapterComposite:
    """Frozen backbone plus a trainable linear head.

    The head consumes the backbone's penultimate representation: the raw
    input for a Logistic backbone, the ReLU hidden layer for an Mlp.
    """

    backbone: "Logistic | Mlp"
    head_classes: int


@dataclass(frozen=True)
class SoftPrompt:
    """Trainable prompt vector appended to each input row.

    The inner model consumes rows of width d + prompt_len and is frozen;
    only the prompt trains.
    """

    inner: "Logistic | Mlp"
    prompt_len: int


ModelSpec = Logistic | Mlp | AdapterComposite | SoftPrompt

_BASE_KINDS = (Logistic, Mlp)


def validate_spec(spec: ModelSpec) -> None:
    if isinstance(spec, Logistic):
        if spec.d < 1 or spec.classes < 2:
            raise ModelError(f"Logistic requires d >= 1 and classes >= 2, got {spec}")
    elif isinstance(spec, Mlp):
        if spec.d < 1 or spec.hidden < 1 or spec.classes < 2:
            raise ModelError(
                f"Mlp requires d >= 1, hidden >= 1, classes >= 2, got {spec}"
            )
    elif isinstance(spec, AdapterComposite):
        if not isinstance(spec.backbone, _BASE_KINDS):
            raise ModelError("adapter backbone must be Logistic or Mlp")
        validate_spec(spec.backbone)
        if spec.head_classes < 2:
            raise ModelError(f"head_classes must be >= 2, got {spec.head_classes}")
    elif isinstance(spec, SoftPrompt):
        if not isinstance(spec.inner, _BASE_KINDS):
            raise ModelError("soft-prompt inner model must be Logistic or Mlp")
        validate_spec(spec.inner)
        if spec.prompt_len < 1:
            raise ModelError(f"prompt_len must be >= 1, got {spec.prompt_len}")
        if spec.inner.d - spec.prompt_len < 1:
            raise ModelError(
                f"inner width {spec.inner.d} leaves no room for data features "
                f"after a prompt of length {spec.prompt_len}"
            )
    else:
        raise ModelError(f"unknown model spec {spec!r}")


def feature_dim(spec: ModelSpec) -> int:
    """Width of the data rows the model consumes."""
    if isinstance(spec, (Logistic, Mlp)):
        return spec.d
    if isinstance(spec, AdapterComposite):
        return spec.backbone.d
    return spec.inner.d - spec.prompt_len


def num_classes(spec: ModelSpec) -> int:
    if isinstance(spec, (Logistic, Mlp)):
        return spec.classes
    if isinstance(spec, AdapterComposite):
        return spec.head_classes
    return spec.inner.classes


def _penultimate_dim(backbone: Logistic | Mlp) -> int:
    return backbone.d if isinstance(backbone, Logistic) else backbone.hidden


@lru_cache(maxsize=None)
def layout_for(spec: ModelSpec) -> Layout:
    validate_spec(spec)
    if isinstance(spec, Logistic):
        return Layout.of(("W", (spec.classes, spec.d)), ("b", (spec.classes,)))
    if isinstance(spec, Mlp):
        return Layout.of(
            ("W1", (spec.hidden, spec.d)),
            ("b1", (spec.hidden,)),
            ("W2", (spec.classes, spec.hidden)),
            ("b2", (spec.classes,)),
        )
    if isinstance(spec, AdapterComposite):
        inner = layout_for(spec.backbone)
        segs = [(f"backbone.{s.name}", s.shape) for s in inner.segments]
        pen = _penultimate_dim(spec.backbone)
        segs.append(("head.W", (spec.head_classes, pen)))
        segs.append(("head.b", (spec.head_classes,)))
        return Layout.of(*segs)
    inner = layout_for(spec.inner)
    segs = [(f"inner.{s.name}", s.shape) for s in inner.segments]
    segs.append(("prompt", (spec.prompt_len,)))
    return Layout.of(*segs)


def trainable_segments(spec: ModelSpec) -> tuple[str, ...]:
    if isinstance(spec, (Logistic, Mlp)):
        return layout_for(spec).names()
    if isinstance(spec, AdapterComposite):
        return ("head.W", "head.b")
    return ("prompt",)


@lru_cache(maxsize=None)
def trainable_mask(spec: ModelSpec) -> np.ndarray:
    """Boolean mask over flat coordinates; True where training may write."""
    layout = layout_for(spec)
    mask = np.zeros(layout.size, dtype=bool)
    for name in trainable_segments(spec):
        lo, hi = layout.span(name)
        mask[lo:hi] = True
    mask.flags.writeable = False
    return mask


def init_params(spec: ModelSpec, seed: int) -> ParameterVector:
    """Glorot-uniform weight matrices, zero biases and prompt."""
    layout = layout_for(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.size)
    for seg in layout.segments:
        if len(seg.shape) == 2:
            fan_out, fan_in = seg.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            lo, hi = layout.span(seg.name)
            values[lo:hi] = rng.uniform(-bound, bound, seg.size)
    return ParameterVector(values, layout)


@dataclass(frozen=True)
class Batch:
    """Feature rows and integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ModelError(f"features must be 2-D, got shape {feats.shape}")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ModelError(
                f"labels shape {labels.shape} does not match {feats.shape[0]} rows"
            )
        if feats.shape[0] < 1:
            raise ModelError("batch must contain at least one row")
        if not np.all(np.isfinite(feats)):
            raise ModelError("batch features must be finite")
        if labels.size and labels.min() < 0:
            raise ModelError("labels must be non-negative class indices")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    d = feature_dim(spec)
    if batch.features.shape[1] != d:
        raise ModelError(
            f"model expects feature width {d}, batch rows have width "
            f"{batch.features.shape[1]}"
        )
    c = num_classes(spec)
    if batch.labels.max() >= c:
        raise ModelError(
            f"label {int(batch.labels.max())} out of range for {c} classes"
        )


def _check_params(spec: ModelSpec, params: ParameterVector) -> None:
    if params.layout != layout_for(spec):
        raise ParameterError(
            f"parameter layout {params.layout.names()} does not match "
            f"spec layout {layout_for(spec).names()}"
        )


def _seg(layout: Layout, values: np.ndarray, name: str) -> np.ndarray:
    lo, hi = layout.span(name)
    seg = next(s for s in layout.segments if s.name == name)
    return values[lo:hi].reshape(seg.shape)


def _with_prompt(spec: SoftPrompt, layout: Layout, values: np.ndarray,
                 X: np.ndarray) -> np.ndarray:
    prompt = _seg(layout, values, "prompt")
    return np.hstack([X, np.broadcast_to(prompt, (X.shape[0], prompt.size))])


def _scores_flat(spec: ModelSpec, values: np.ndarray, X: np.ndarray) -> np.ndarray:
    layout = layout_for(spec)
    if isinstance(spec, Logistic):
        return X @ _seg(layout, values, "W").T + _seg(layout, values, "b")
    if isinstance(spec, Mlp):
        hidden = np.maximum(
            X @ _seg(layout, values, "W1").T + _seg(layout, values, "b1"), 0.0
        )
        return hidden @ _seg(layout, values, "W2").T + _seg(layout, values, "b2")
    if isinstance(spec, AdapterComposite):
        pen = _backbone_penultimate(spec, layout, values, X)
        return pen @ _seg(layout, values, "head.W").T + _seg(layout, values, "head.b")
    inner_vals = values[: layout_for(spec.inner).size]
    return _scores_flat(spec.inner, inner_vals, _with_prompt(spec, layout, values, X))


def _backbone_penultimate(spec: AdapterComposite, layout: Layout,
                          values: np.ndarray, X: np.ndarray) -> np.ndarray:
    if isinstance(spec.backbone, Logistic):
        return X
    return np.maximum(
        X @ _seg(layout, values, "backbone.W1").T
        + _seg(layout, values, "backbone.b1"),
        0.0,
    )


def scores(spec: ModelSpec, params: ParameterVector, X: np.ndarray) -> np.ndarray:
    """Class scores for a batch of rows (rows x classes)."""
    _check_params(spec, params)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != feature_dim(spec):
        raise ModelError(
            f"model expects rows of width {feature_dim(spec)}, got shape {X.shape}"
        )
    return _scores_flat(spec, params.values, X)


def forward(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    """Score vector (length classes) for one feature row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ModelError(f"forward expects a single row, got shape {x.shape}")
    return scores(spec, params, x[None, :])[0]


def predict(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> int:
    """Predicted class; ties resolve to the lowest class index."""
    return int(np.argmax(forward(spec, params, x)))


def _loss_only(spec: ModelSpec, values: np.ndarray, X: np.ndarray,
               y: np.ndarray) -> float:
    s = _scores_flat(spec, values, X)
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    return float(np.mean(lse - s[np.arange(s.shape[0]), y]))


def _loss_grad_flat(spec: ModelSpec, values: np.ndarray, X: np.ndarray,
                    y: np.ndarray) -> tuple[float, np.ndarray]:
    layout = layout_for(spec)
    grad = np.zeros(layout.size)

    def put(name, g):
        lo, hi = layout.span(name)
        grad[lo:hi] = np.asarray(g).ravel()

    if isinstance(spec, Logistic):
        loss, gW, gb = kernels.logistic_loss_grad(
            _seg(layout, values, "W"), _seg(layout, values, "b"), X, y
        )
        put("W", gW)
        put("b", gb)
    elif isinstance(spec, Mlp):
        loss, gW1, gb1, gW2, gb2 = kernels.mlp_loss_grad(
            _seg(layout, values, "W1"), _seg(layout, values, "b1"),
            _seg(layout, values, "W2"), _seg(layout, values, "b2"), X, y,
        )
        put("W1", gW1)
        put("b1", gb1)
        put("W2", gW2)
        put("b2", gb2)
    elif isinstance(spec, AdapterComposite):
        pen = np.ascontiguousarray(_backbone_penultimate(spec, layout, values, X))
        loss, gW, gb = kernels.logistic_loss_grad(
            _seg(layout, values, "head.W"), _seg(layout, values, "head.b"), pen, y
        )
        put("head.W", gW)
        put("head.b", gb)
    else:
        d = feature_dim(spec)
        Xp = _with_prompt(spec, layout, values, X)
        if isinstance(spec.inner, Logistic):
            # d(mean loss)/d(prompt) = W[:, d:]^T @ mean softmax error,
            # and the mean error is exactly the inner bias gradient.
            W = _seg(layout, values, "inner.W")
            loss, _, gb = kernels.logistic_loss_grad(
                W, _seg(layout, values, "inner.b"), Xp, y
            )
            put("prompt", W[:, d:].T @ gb)
        else:
            W1 = _seg(layout, values, "inner.W1")
            loss, _, gb1, _, _ = kernels.mlp_loss_grad(
                W1, _seg(layout, values, "inner.b1"),
                _seg(layout, values, "inner.W2"), _seg(layout, values, "inner.b2"),
                Xp, y,
            )
            put("prompt", W1[:, d:].T @ gb1)
    return float(loss), grad


def loss_and_grad(spec: ModelSpec, params: ParameterVector,
                  batch: Batch) -> tuple[float, ParameterVector]:
    """Mean softmax cross-entropy and its gradient.

    Gradient entries of non-trainable segments are exactly 0.0.
    """
    _check_params(spec, params)
    _check_batch(spec, batch)
    loss, grad = _loss_grad_flat(spec, params.values, batch.features, batch.labels)
    return loss, ParameterVector(grad, params.layout)


def sgd_epoch(spec: ModelSpec, params: ParameterVector, data: Batch,
              lr: float, batch_size: int, seed: int) -> ParameterVector:
    """One shuffled pass of minibatch SGD; only trainable segments move."""
    _check_params(spec, params)
    _check_batch(spec, data)
    if lr <= 0:
        raise ModelError(f"learning rate must be positive, got {lr}")
    if batch_size < 1:
        raise ModelError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    values = params.mutable_values()
    writable = np.flatnonzero(trainable_mask(spec))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        _, grad = _loss_grad_flat(
            spec, values, data.features[idx], data.labels[idx]
        )
        values[writable] -= lr * grad[writable]
    return params.with_values(values)


def finite_diff_grad(spec: ModelSpec, params: ParameterVector, batch: Batch,
                     h: float) -> ParameterVector:
    """Central-difference gradient over trainable coordinates only.

    Uses the loss-only forward path, never the analytic backward path,
    so it serves as an independent check of `loss_and_grad`.
    """
    _check_params(spec, params)
    _check_batch(spec, batch)
    if h <= 0:
        raise ModelError(f"step h must be positive, got {h}")
    base = params.mutable_values()
    grad = np.zeros_like(base)
    for i in np.flatnonzero(trainable_mask(spec)):
        saved = base[i]
        base[i] = saved + h
        up = _loss_only(spec, base, batch.features, batch.labels)
        base[i] = saved - h
        down = _loss_only(spec, base, batch.features, batch.labels)
        base[i] = saved
        grad[i] = (up - down) / (2.0 * h)
    return ParameterVector(grad, params.layout)

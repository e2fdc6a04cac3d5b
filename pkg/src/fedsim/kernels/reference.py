"""NumPy reference implementations of the hot training kernels.

These define the semantics the compiled backend must reproduce: softmax
cross-entropy with max-subtraction, mean reduction over the batch, and
gradients for the linear and one-hidden-layer models. Order of
floating-point reductions differs between backends, so results agree to
roundoff, not bit-for-bit.
"""

from __future__ import annotations

import numpy as np

NAME = "reference"


def _log_softmax_stats(scores: np.ndarray, labels: np.ndarray):
    """Per-row log-sum-exp, probabilities, and mean cross-entropy."""
    m = scores.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(scores - m).sum(axis=1, keepdims=True))
    rows = np.arange(scores.shape[0])
    loss = float(np.mean(lse[:, 0] - scores[rows, labels]))
    probs = np.exp(scores - lse)
    return loss, probs


def _error_matrix(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    err = probs.copy()
    err[np.arange(err.shape[0]), labels] -= 1.0
    return err


def logistic_loss_grad(W, b, X, y):
    """Mean softmax cross-entropy and gradients for scores = X W^T + b."""
    n = X.shape[0]
    scores = X @ W.T + b
    loss, probs = _log_softmax_stats(scores, y)
    err = _error_matrix(probs, y) / n
    grad_W = err.T @ X
    grad_b = err.sum(axis=0)
    return loss, grad_W, grad_b


def mlp_hidden(W1, b1, X):
    """ReLU hidden activations of the one-hidden-layer model."""
    return np.maximum(X @ W1.T + b1, 0.0)


def mlp_loss_grad(W1, b1, W2, b2, X, y):
    """Loss and gradients for scores = relu(X W1^T + b1) W2^T + b2."""
    n = X.shape[0]
    pre = X @ W1.T + b1
    hidden = np.maximum(pre, 0.0)
    scores = hidden @ W2.T + b2
    loss, probs = _log_softmax_stats(scores, y)
    err = _error_matrix(probs, y) / n
    grad_W2 = err.T @ hidden
    grad_b2 = err.sum(axis=0)
    back = (err @ W2) * (pre > 0.0)
    grad_W1 = back.T @ X
    grad_b1 = back.sum(axis=0)
    return loss, grad_W1, grad_b1, grad_W2, grad_b2

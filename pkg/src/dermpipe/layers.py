"""Dense / batch-norm / ReLU / dropout primitives with explicit backward passes.

Every layer follows the (out, cache) = *_forward(...), grads = *_backward(dout, cache)
convention so a network can assemble a stack and check its gradients against
finite differences. Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1  # weight of the current batch statistic in the running average


def dense_forward(x, w, b):
    out = x @ w + b
    return out, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode,
                      eps=BN_EPS, momentum=BN_MOMENTUM):
    """Batch normalization over axis 0.

    mode "batch" normalizes with the statistics of x (biased variance) and
    returns updated running statistics; mode "running" normalizes with the
    running statistics and leaves them untouched.
    """
    if mode == "batch":
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        new_mean = (1.0 - momentum) * running_mean + momentum * mu
        new_var = (1.0 - momentum) * running_var + momentum * var
    elif mode == "running":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = gamma * xhat + beta
    cache = (xhat, gamma, inv_std, mode)
    return out, cache, (new_mean, new_var)


def batchnorm_backward(dout, cache):
    """Gradient through batch normalization, including the batch statistics."""
    xhat, gamma, inv_std, mode = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if mode == "running":
        dx = dxhat * inv_std
    else:
        n = xhat.shape[0]
        dx = inv_std / n * (n * dxhat
                            - dxhat.sum(axis=0)
                            - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def dropout_forward(x, p, rng: np.random.Generator | None):
    """Inverted dropout: keep with probability 1-p and rescale. p=0 is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0 or rng is None:
        mask = None
        out = x
    else:
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        out = x * mask
    return out, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, label: int, weights) -> float:
    """Loss of a single example: weight[label] * (-log softmax(logits)[label])."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError("weighted_cross_entropy takes one logit vector; "
                         "use weighted_ce_batch for batches")
    return float(-weights[label] * log_softmax(logits)[label])


def weighted_ce_batch(logits, labels, weights):
    """Mean weighted cross-entropy over a batch, plus the logit gradient.

    Returns (loss, dlogits) where loss = mean_i w_{y_i} * (-log p_i[y_i])
    and dlogits is the gradient of that mean.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    logp = log_softmax(logits)
    w = np.asarray(weights, dtype=np.float64)[labels]
    loss = float(np.mean(-w * logp[np.arange(n), labels]))
    dlogits = np.exp(logp) * w[:, None]
    dlogits[np.arange(n), labels] -= w
    dlogits /= n
    return loss, dlogits

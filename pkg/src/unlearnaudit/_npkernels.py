"""Pure-numpy training kernels.

Parameters of an MLP live in one flat float64 vector, layer-major: for
every layer the ``(fan_in, fan_out)`` weight matrix in row-major order,
followed by its bias.  Hidden layers use ReLU; the last layer feeds a
softmax cross-entropy.

The compiled module ``_ckernels`` exposes the same two step functions with
identical semantics; :mod:`unlearnaudit.backend` picks one at import.
"""
from __future__ import annotations

import numpy as np


def layer_offsets(arch):
    """Yield ``(w_start, b_start, b_end, fan_in, fan_out)`` per layer."""
    pos = 0
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        w0 = pos
        b0 = w0 + fan_in * fan_out
        pos = b0 + fan_out
        yield w0, b0, pos, fan_in, fan_out


def n_params(arch) -> int:
    return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))


def unpack(params, arch):
    return [
        (params[w0:b0].reshape(fi, fo), params[b0:b1])
        for w0, b0, b1, fi, fo in layer_offsets(arch)
    ]


def forward(params, arch, X, keep=False):
    """Logits for ``X``; with ``keep`` also the per-layer inputs."""
    a = X
    acts = [a]
    layers = unpack(params, arch)
    for li, (W, b) in enumerate(layers):
        z = a @ W + b
        if li < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
        else:
            a = z
    return (a, acts) if keep else a


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _output_delta(logits, y):
    d = softmax(logits)
    d[np.arange(y.shape[0]), y] -= 1.0
    return d


def loss_and_grad(params, arch, X, y):
    """Mean cross-entropy and its gradient w.r.t. the flat parameters."""
    logits, acts = forward(params, arch, X, keep=True)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = X.shape[0]
    loss = -logp[np.arange(n), y].mean()
    grad = np.empty_like(params)
    delta = _output_delta(logits, y) / n
    layers = unpack(params, arch)
    offs = list(layer_offsets(arch))
    for li in range(len(layers) - 1, -1, -1):
        w0, b0, b1, _, _ = offs[li]
        a = acts[li]
        grad[w0:b0] = (a.T @ delta).ravel()
        grad[b0:b1] = delta.sum(axis=0)
        if li:
            delta = (delta @ layers[li][0].T) * (a > 0)
    return loss, grad


def per_sample_grads(params, arch, X, y):
    """Gradient of each sample's own cross-entropy, shape ``(n, P)``."""
    logits, acts = forward(params, arch, X, keep=True)
    n = X.shape[0]
    out = np.empty((n, params.shape[0]))
    delta = _output_delta(logits, y)
    layers = unpack(params, arch)
    offs = list(layer_offsets(arch))
    for li in range(len(layers) - 1, -1, -1):
        w0, b0, b1, fi, fo = offs[li]
        a = acts[li]
        out[:, w0:b0] = np.einsum("ni,nj->nij", a, delta).reshape(n, fi * fo)
        out[:, b0:b1] = delta
        if li:
            delta = (delta @ layers[li][0].T) * (a > 0)
    return out


def sgd_steps(params, arch, X, y, idx, offsets, lr, decay, update_mask, sign):
    """Run ``len(offsets) - 1`` minibatch steps in place on ``params``.

    Step ``s`` uses rows ``idx[offsets[s]:offsets[s+1]]``.  The update is
    ``params -= lr * (sign * grad + decay * params) * update_mask``; ``decay``
    is a per-coordinate vector, ``update_mask`` is a 0/1 vector.
    """
    arch = tuple(arch)
    for s in range(offsets.shape[0] - 1):
        rows = idx[offsets[s] : offsets[s + 1]]
        _, g = loss_and_grad(params, arch, X[rows], y[rows])
        params -= lr * (sign * g + decay * params) * update_mask


def dp_sgd_steps(params, arch, X, y, idx, offsets, lr, decay, clip, noise):
    """DP-SGD steps in place: clip each per-sample gradient to ``clip``, sum,
    add ``noise[s]`` (already scaled by sigma * clip), divide by batch size."""
    arch = tuple(arch)
    for s in range(offsets.shape[0] - 1):
        rows = idx[offsets[s] : offsets[s + 1]]
        g = per_sample_grads(params, arch, X[rows], y[rows])
        norms = np.sqrt(np.einsum("ij,ij->i", g, g))
        scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
        total = scale @ g + noise[s]
        params -= lr * (total / rows.shape[0] + decay * params)

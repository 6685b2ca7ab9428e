"""Backpropagation reference: exact gradients of the batch loss."""

from __future__ import annotations

import numpy as np

from ..controller import LossFamily, LossKind, soft_targets, softmax
from ..netcore import NetworkParams, forward_ss


def loss_gradients(params: NetworkParams, X, labels, loss: LossKind):
    """Gradients of the mean per-sample loss w.r.t. every ``W_i`` and ``b_i``.

    Squared error is ``||y - r_L||^2`` (no factor 1/2), matching
    :func:`controller.sample_loss`.
    """
    X = np.atleast_2d(X)
    labels = np.atleast_2d(labels)
    B = X.shape[0]
    acts = forward_ss(params, X)
    out = acts.output
    if loss.family is LossFamily.SQUARED_ERROR:
        g_out = -2.0 * (labels - out) / B
        delta = g_out * params.layers[-1].activation.dphi(acts.v[-1])
    else:
        delta = (softmax(out) - soft_targets(labels, loss.a)) / B
        delta = delta * params.layers[-1].activation.dphi(acts.v[-1])
    L = params.depth
    gW, gb = [None] * L, [None] * L
    for i in range(L - 1, -1, -1):
        pre = acts.r[i - 1] if i > 0 else X
        gW[i] = delta.T @ pre
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.layers[i].W) * params.layers[i - 1].activation.dphi(acts.v[i - 1])
    return gW, gb

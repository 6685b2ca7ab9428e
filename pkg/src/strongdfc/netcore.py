"""Static layered network: parameters, feedforward steady state and Jacobians.

Arrays follow one convention throughout the package: a single sample is a
1-D vector, a batch is a 2-D array with samples along axis 0.  Weight
matrices are normally 2-D and shared by the whole batch, but may carry a
leading batch axis (``(B, n_out, n_in)``) when every sample has its own
copy, e.g. per-sample ideal feedback weights or perturbed parameter sets.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError


class ActivationKind(enum.Enum):
    TANH = "tanh"
    LINEAR = "linear"

    def phi(self, v):
        if self is ActivationKind.TANH:
            return np.tanh(v)
        return np.array(v, dtype=float, copy=True)

    def dphi(self, v):
        if self is ActivationKind.TANH:
            t = np.tanh(v)
            return 1.0 - t * t
        return np.ones_like(v, dtype=float)

    def dphi_from_rate(self, r):
        """Derivative expressed through the rate ``r = phi(v)`` (saves a tanh)."""
        if self is ActivationKind.TANH:
            return 1.0 - r * r
        return np.ones_like(r, dtype=float)

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown activation {name!r}; choose from "
                             f"{[a.value for a in cls]}") from None


@dataclass
class LayerParams:
    W: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    activation: ActivationKind = ActivationKind.TANH

    @property
    def n_out(self):
        return self.W.shape[-2]

    @property
    def n_in(self):
        return self.W.shape[-1]


@dataclass
class NetworkParams:
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.validate()

    def validate(self):
        if not self.layers:
            raise ShapeError("layers", "at least one layer", 0)
        n_L = self.layers[-1].n_out
        prev = self.layers[0].n_in
        for i, layer in enumerate(self.layers, start=1):
            if layer.n_in != prev:
                raise ShapeError(f"W_{i} columns", prev, layer.n_in)
            if layer.b.shape[-1] != layer.n_out:
                raise ShapeError(f"b_{i}", layer.n_out, layer.b.shape)
            if layer.Q.shape[-2:] != (layer.n_out, n_L):
                raise ShapeError(f"Q_{i}", (layer.n_out, n_L), layer.Q.shape)
            for name in ("W", "b", "Q"):
                if not np.all(np.isfinite(getattr(layer, name))):
                    raise NumericError(f"non-finite entries in {name}_{i}")
            prev = layer.n_out

    @property
    def depth(self):
        return len(self.layers)

    @property
    def sizes(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def n_out(self):
        return self.layers[-1].n_out

    @property
    def n_hidden_total(self):
        """Total number of units over layers 1..L (the length of concatenated v)."""
        return sum(layer.n_out for layer in self.layers)

    def Q_full(self):
        """Concatenated feedback weights ``[Q_1; ...; Q_L]``."""
        return np.concatenate([layer.Q for layer in self.layers], axis=-2)

    def with_Q(self, Qs):
        return NetworkParams(tuple(replace(layer, Q=np.asarray(Q, dtype=float))
                                   for layer, Q in zip(self.layers, Qs)))

    def with_W(self, Ws):
        return NetworkParams(tuple(replace(layer, W=np.asarray(W, dtype=float))
                                   for layer, W in zip(self.layers, Ws)))

    def copy(self):
        return NetworkParams(tuple(replace(layer, W=layer.W.copy(), b=layer.b.copy(),
                                           Q=layer.Q.copy())
                                   for layer in self.layers))


@dataclass
class LayerActivations:
    v: list
    r: list
    r0: np.ndarray

    @property
    def output(self):
        return self.r[-1]

    def v_concat(self):
        return np.concatenate(self.v, axis=-1)


def split_blocks(x, sizes, axis=-1):
    """Split a concatenated vector/matrix along ``axis`` into per-layer pieces."""
    return np.split(x, np.cumsum(sizes)[:-1], axis=axis)


def init_network(sizes: Sequence[int], activations=None, seed=0, rng=None,
                 output_activation=ActivationKind.LINEAR) -> NetworkParams:
    """Random network with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    ``sizes`` includes the input dimension.  Hidden layers default to tanh
    and the output layer to ``output_activation``.  Feedback weights are
    drawn the same way as forward weights with fan-in ``n_L``; biases are 0.
    """
    if len(sizes) < 2:
        raise ShapeError("sizes", "input size plus at least one layer", list(sizes))
    rng = np.random.default_rng(seed) if rng is None else rng
    L = len(sizes) - 1
    if activations is None:
        activations = [ActivationKind.TANH] * (L - 1) + [ActivationKind.parse(output_activation)]
    activations = [ActivationKind.parse(a) for a in activations]
    n_L = sizes[-1]
    layers = []
    for i in range(1, L + 1):
        bound = 1.0 / np.sqrt(sizes[i - 1])
        W = rng.uniform(-bound, bound, size=(sizes[i], sizes[i - 1]))
        qb = 1.0 / np.sqrt(n_L)
        Q = rng.uniform(-qb, qb, size=(sizes[i], n_L))
        layers.append(LayerParams(W=W, b=np.zeros(sizes[i]), Q=Q, activation=activations[i - 1]))
    return NetworkParams(tuple(layers))


def affine(M, x):
    """``M @ x`` for a single sample or a batch.

    ``M`` is ``(n, m)`` (shared) or ``(B, n, m)`` (per sample); ``x`` is
    ``(m,)`` or ``(B, m)``.
    """
    if M.ndim == 2:
        return x @ M.T
    if x.ndim == 1:
        return np.einsum("bij,j->bi", M, x)
    return np.einsum("bij,bj->bi", M, x)


def _check_input(params, x):
    x = np.asarray(x, dtype=float)
    n0 = params.layers[0].n_in
    if x.shape[-1:] != (n0,) or x.ndim > 2:
        raise ShapeError("input x", f"(..., {n0})", x.shape)
    return x


def forward_ss(params: NetworkParams, x, offsets=None) -> LayerActivations:
    """Controller-free steady state ``v_i = W_i phi(v_{i-1}) + b_i`` with ``r_0 = x``.

    ``offsets`` optionally injects an additive term into each ``v_i``; it is
    how Jacobians are probed by finite differences.
    """
    x = _check_input(params, x)
    vs, rs = [], []
    r = x
    for i, layer in enumerate(params.layers):
        v = affine(layer.W, r) + layer.b
        if offsets is not None:
            v = v + offsets[i]
        r = layer.activation.phi(v)
        vs.append(v)
        rs.append(r)
    return LayerActivations(v=vs, r=rs, r0=x)


def activations_from_v(params: NetworkParams, v_list, x) -> LayerActivations:
    """Wrap an arbitrary set of layer potentials as activations (``r_i = phi(v_i)``)."""
    rs = [layer.activation.phi(v) for layer, v in zip(params.layers, v_list)]
    return LayerActivations(v=list(v_list), r=rs, r0=np.asarray(x, dtype=float))


def jacobian_blocks(params: NetworkParams, acts: LayerActivations):
    """Blocks ``dr_L/dv_i`` for i = 1..L, each ``(n_L, n_i)`` (or batched).

    Built by backward chaining:
    ``dr_L/dv_L = diag(phi'(v_L))`` and
    ``dr_L/dv_i = dr_L/dv_{i+1} W_{i+1} diag(phi'(v_i))``.
    """
    if len(acts.v) != params.depth:
        raise ShapeError("activations", params.depth, len(acts.v))
    L = params.depth
    dphi = [layer.activation.dphi(v) for layer, v in zip(params.layers, acts.v)]
    blocks = [None] * L
    last = dphi[-1]
    if last.ndim == 1:
        blocks[-1] = np.diag(last)
    else:
        blocks[-1] = last[:, :, None] * np.eye(last.shape[-1])
    for i in range(L - 2, -1, -1):
        W_next = params.layers[i + 1].W
        prod = blocks[i + 1] @ W_next
        blocks[i] = prod * dphi[i][..., None, :]
    return blocks


def jacobian(params: NetworkParams, acts: LayerActivations):
    """Full network Jacobian ``J = [dr_L/dv_1, ..., dr_L/dv_L]`` of shape ``(n_L, sum n_i)``."""
    return np.concatenate(jacobian_blocks(params, acts), axis=-1)


def block_matrices(params: NetworkParams, acts: LayerActivations):
    """Lower-shift block matrix ``W``, output selector ``S`` and ``diag(phi')``.

    Single-sample only.  ``W`` has ``W_i`` in block row i, block column i-1
    (so ``W_1`` is absent); ``S = [0 ... 0 I]``.
    """
    sizes = [layer.n_out for layer in params.layers]
    N = sum(sizes)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    W_block = np.zeros((N, N))
    for i in range(1, params.depth):
        W_block[offs[i]:offs[i + 1], offs[i - 1]:offs[i]] = params.layers[i].W
    S = np.zeros((params.n_out, N))
    S[:, offs[-2]:] = np.eye(params.n_out)
    dphi = np.concatenate([layer.activation.dphi(v) for layer, v in zip(params.layers, acts.v)])
    return W_block, S, np.diag(dphi)

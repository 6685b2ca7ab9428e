"""Weight-change rules and their application through an optimizer.

Increments are summed over the batch axis of a simulation state; the
simulation loop accumulates them every step and :meth:`UpdateBuffer.finalize`
turns the sums into per-step, per-sample averages.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .controller import LossKind, control_error
from .errors import NumericError, StaleStateError
from .netcore import LayerParams, NetworkParams, affine


@dataclass
class UpdateBuffer:
    dW: list
    db: list
    dQ: list
    steps_accumulated: int = 0
    finalized: bool = False

    @classmethod
    def zeros_like(cls, params):
        return cls(dW=[np.zeros(layer.W.shape[-2:]) for layer in params.layers],
                   db=[np.zeros(layer.b.shape[-1:]) for layer in params.layers],
                   dQ=[np.zeros(layer.Q.shape[-2:]) for layer in params.layers])

    def finalize(self, n_samples=1):
        if self.finalized:
            return self
        scale = 1.0 / (max(self.steps_accumulated, 1) * n_samples)
        for group in (self.dW, self.db, self.dQ):
            for i in range(len(group)):
                group[i] = group[i] * scale
        self.finalized = True
        return self

    def scaled(self, c_forward=1.0, c_feedback=1.0):
        return UpdateBuffer(dW=[c_forward * d for d in self.dW], db=[c_forward * d for d in self.db],
                            dQ=[c_feedback * d for d in self.dQ],
                            steps_accumulated=self.steps_accumulated, finalized=self.finalized)


def _outer_sum(post, pre, weights=None):
    if post.ndim == 1:
        return np.outer(post, pre)
    if weights is not None:
        post = post * weights[:, None]
    return post.T @ pre


def forward_increment(state, params, i, debias=True, weights=None):
    """Local forward-weight increment for layer ``i`` (0-based).

    ``(phi(v_i) - phi(v_i^ff)) pre^T`` with ``pre`` the previous layer's rate,
    low-pass filtered when ``debias`` is set.  Returns ``(dW_i, db_i)``
    summed over the batch.  Reads nothing but layer i's compartments and its
    presynaptic signal.
    """
    act = params.layers[i].activation
    post = act.phi(state.v[i]) - act.phi(state.v_ff[i])
    pre = state.r_bar[i] if debias else state.r_in(i)
    dW = _outer_sum(post, pre, weights)
    if post.ndim == 1:
        return dW, post.copy()
    if weights is not None:
        post = post * weights[:, None]
    return dW, post.sum(axis=0)


def feedback_increment(state, i, Q_i, scale, beta, weights=None, n=None):
    """Anti-Hebbian feedback increment ``-scale v_fb_i u_hp^T - beta Q_i``.

    ``scale`` is ``(1 + tau_v/tau_eps)^(L-i)`` (1 when the compensation is
    switched off).  ``v_fb`` is taken from the previous step, ``u_hp = u -
    u_bar`` from the current one.  Summed over the batch; the decay term is
    counted once per sample (``n`` samples).
    """
    v_fb = state.v_fb_prev[i]
    u_hp = state.ctrl.u - state.u_bar
    corr = _outer_sum(v_fb, u_hp, weights)
    if n is None:
        n = 1 if v_fb.ndim == 1 else v_fb.shape[0]
    return -scale * corr - n * beta * Q_i


def feedback_scale(L, i, tau_v, tau_eps):
    """Delay compensation factor for layer ``i`` (0-based) of an L-layer net."""
    return (1.0 + tau_v / tau_eps) ** (L - 1 - i)


def steady_state_update(params, state, alpha_tilde, loss=None, tol=1e-6, check=True):
    """Idealised forward update ``(v_i - v_i^ff) r_{i-1}^T`` at a converged state.

    Returns per-layer ``(dW, db)`` lists averaged over the batch.  Raises
    :class:`StaleStateError` when ``||e - alpha_tilde u||`` exceeds ``tol``.
    """
    if check:
        loss = loss or LossKind.squared_error()
        e = control_error(loss, state.target, state.r[-1])
        res = np.linalg.norm(np.atleast_2d(e - alpha_tilde * state.ctrl.u), axis=-1)
        if np.max(res) > tol:
            raise StaleStateError(float(np.max(res)), tol)
    dW, db = [], []
    for i, layer in enumerate(params.layers):
        pre = np.atleast_2d(state.r_in(i))
        delta = np.atleast_2d(state.v[i]) - (affine(layer.W, pre) + layer.b)
        n = delta.shape[0]
        dW.append(delta.T @ pre / n)
        db.append(delta.sum(axis=0) / n)
    return dW, db


class OptimizerKind(enum.Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"


@dataclass
class OptimizerConfig:
    kind: OptimizerKind = OptimizerKind.SGD
    lr_forward: float = 1e-3
    lr_feedback: float = 1e-2
    momentum: float = 0.0

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not (self.lr_forward > 0 and self.lr_feedback > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class Optimizer:
    """Stateful SGD / heavy-ball optimizer over (W, b, Q) increments."""
    config: OptimizerConfig
    velocity: dict = field(default_factory=dict)

    def _transform(self, key, d):
        if self.config.kind is OptimizerKind.SGD:
            return d
        vel = self.velocity.get(key)
        vel = d.copy() if vel is None else self.config.momentum * vel + d
        self.velocity[key] = vel
        return vel


def apply_updates(params, buffer: UpdateBuffer, opt, update_forward=True, update_feedback=True):
    """Return new params ``W + lr * T(dW)`` etc.; ``params`` is left untouched.

    ``opt`` is an :class:`Optimizer` (keeps momentum state across calls) or a
    bare :class:`OptimizerConfig` (stateless).
    """
    if isinstance(opt, OptimizerConfig):
        opt = Optimizer(opt)
    cfg = opt.config
    layers = []
    for i, layer in enumerate(params.layers):
        W, b, Q = layer.W, layer.b, layer.Q
        if update_forward:
            dW = opt._transform(("W", i), buffer.dW[i])
            db = opt._transform(("b", i), buffer.db[i])
            W = W + cfg.lr_forward * dW
            b = b + cfg.lr_forward * db
        if update_feedback:
            dQ = opt._transform(("Q", i), buffer.dQ[i])
            Q = Q + cfg.lr_feedback * dQ
        for name, arr in (("W", W), ("b", b), ("Q", Q)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite {name}_{i + 1} after update")
        layers.append(LayerParams(W=W, b=b, Q=Q, activation=layer.activation))
    return NetworkParams(tuple(layers))

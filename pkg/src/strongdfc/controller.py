"""Output error and the discrete proportional-integral controller."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


class TargetKind(enum.Enum):
    STRONG = "strong"
    NUDGED = "nudged"


@dataclass(frozen=True)
class TargetMode:
    """Where the controller drives the output.

    STRONG uses the supervised label itself.  NUDGED (weak-feedback DFC)
    moves the controller-free output a step ``lam`` along the control error.
    """
    kind: TargetKind = TargetKind.STRONG
    lam: float = 0.0

    def __post_init__(self):
        if self.kind is TargetKind.NUDGED and not self.lam > 0:
            raise ValueError("nudged target mode needs lam > 0")

    @classmethod
    def strong(cls):
        return cls(TargetKind.STRONG)

    @classmethod
    def nudged(cls, lam):
        return cls(TargetKind.NUDGED, float(lam))


class LossFamily(enum.Enum):
    SQUARED_ERROR = "mse"
    SOFTMAX_CE = "softmax_ce"


@dataclass(frozen=True)
class LossKind:
    family: LossFamily = LossFamily.SQUARED_ERROR
    a: float = 0.99

    def __post_init__(self):
        if self.family is LossFamily.SOFTMAX_CE and not 0.0 < self.a < 1.0:
            raise ValueError(f"soft-target mass must lie in (1/n_L, 1), got {self.a}")

    @classmethod
    def squared_error(cls):
        return cls(LossFamily.SQUARED_ERROR)

    @classmethod
    def softmax_ce(cls, a=0.99):
        return cls(LossFamily.SOFTMAX_CE, float(a))

    @property
    def is_classification(self):
        return self.family is LossFamily.SOFTMAX_CE


def softmax(z):
    z = np.asarray(z, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=float)
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def soft_targets(labels_onehot, a):
    """``a`` on the label entry, ``(1-a)/(n_L-1)`` elsewhere."""
    onehot = np.asarray(labels_onehot, dtype=float)
    n_L = onehot.shape[-1]
    if n_L < 2:
        raise ShapeError("one-hot label", "n_L >= 2", onehot.shape)
    if not a > 1.0 / n_L:
        raise ValueError(f"soft-target mass a={a} must exceed 1/n_L={1.0 / n_L}")
    off = (1.0 - a) / (n_L - 1)
    return np.where(onehot > 0.5, a, off)


def control_error(loss: LossKind, target, output):
    """Control error ``e = -dL/dr_L``.

    Squared error: ``target - output``.  Softmax cross-entropy: ``p* -
    softmax(output)`` where ``target`` is the one-hot label and ``p*`` its
    soft version.
    """
    target = np.asarray(target, dtype=float)
    output = np.asarray(output, dtype=float)
    if target.shape[-1] != output.shape[-1]:
        raise ShapeError("target", output.shape, target.shape)
    if not np.all(np.isfinite(output)):
        raise NumericError("non-finite network output in control error")
    if loss.family is LossFamily.SQUARED_ERROR:
        return target - output
    return soft_targets(target, loss.a) - softmax(output)


def sample_loss(loss: LossKind, target, output):
    """Per-sample loss values (last axis reduced).

    Squared error is ``||target - output||^2`` without a factor 1/2; softmax
    cross-entropy is the combined loss ``-p*^T log softmax(output)``.
    """
    target = np.asarray(target, dtype=float)
    output = np.asarray(output, dtype=float)
    if loss.family is LossFamily.SQUARED_ERROR:
        return np.sum((target - output) ** 2, axis=-1)
    return -np.sum(soft_targets(target, loss.a) * log_softmax(output), axis=-1)


def nudged_target(loss: LossKind, target, output_ff, lam):
    """Weak-feedback target: controller-free output nudged by ``lam * e``."""
    return np.asarray(output_ff, dtype=float) + lam * control_error(loss, target, output_ff)


@dataclass
class ControllerState:
    u: np.ndarray
    u_int: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(u=np.zeros(shape), u_int=np.zeros(shape))


def controller_step(state: ControllerState, e, dt, tau_u, alpha_tilde, k) -> ControllerState:
    """One step of ``tau_u du_int/dt = e - alpha_tilde * u``, ``u = u_int + k e``."""
    u_int = state.u_int + (dt / tau_u) * (e - alpha_tilde * state.u)
    return ControllerState(u=u_int + k * e, u_int=u_int)

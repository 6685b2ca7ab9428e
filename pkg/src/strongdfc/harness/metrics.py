"""Diagnostic rows and the metrics CSV."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .. import theory
from ..controller import sample_loss
from ..errors import ConditioningError, DivergenceError
from ..netcore import activations_from_v, forward_ss, jacobian
from ..plasticity import steady_state_update

NAN = float("nan")


@dataclass
class DiagnosticsRecord:
    epoch: int
    train_loss: float = NAN
    val_loss: float = NAN
    train_err: float = NAN
    val_err: float = NAN
    H: float = NAN
    angle_deg: float = NAN
    fb_ff_ratio: float = NAN
    con1_ratio: float = NAN
    max_re_eig: float = NAN
    diverged: int = 0

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        out = []
        for v in astuple(self):
            if isinstance(v, float):
                out.append("NaN" if math.isnan(v) else repr(v))
            else:
                out.append(str(v))
        return out


class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(DiagnosticsRecord.header())
        self._fh.flush()

    def write(self, rec: DiagnosticsRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    """Load a metrics CSV into a dict of float arrays keyed by column."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in DiagnosticsRecord.header()}


def dataset_loss(params, ds, loss):
    """Mean loss and error rate (NaN for regression) of the controller-free output."""
    if ds is None or len(ds) == 0:
        return NAN, NAN
    out = forward_ss(params, ds.inputs).output
    L = float(np.mean(sample_loss(loss, ds.targets, out)))
    err = NAN
    if ds.is_classification:
        err = float(np.mean(np.argmax(out, axis=-1) != ds.labels))
    return L, err


def probe_metrics(params, X, labels, sim, tol=1e-9, max_steps=200_000):
    """Noise-free equilibrium metrics on a probe batch.

    Returns a dict with H (mean per sample), the angle between the
    steady-state forward update and ``-dH/dW``, the feedback/forward ratio,
    the condition-1 ratio and the largest real eigenvalue of ``-J Q``.
    Fields that cannot be computed (divergence, singular systems) are NaN.
    """
    out = dict(H=NAN, angle_deg=NAN, fb_ff_ratio=NAN, con1_ratio=NAN, max_re_eig=NAN)
    try:
        state, diag = theory.solve_equilibrium(params, X, labels, sim, tol=tol, max_steps=max_steps)
    except DivergenceError:
        return out
    converged = bool(np.all(diag.fixed_point_residual < 1e-6) and np.all(diag.equilibrium_residual < 1e-6))
    out["H"] = float(np.mean(diag.H))
    out["fb_ff_ratio"] = float(np.mean(diag.fb_ff_ratio))
    acts = activations_from_v(params, state.v, state.x)
    Q = np.concatenate(state.Q, axis=-2)
    if Q.ndim == 2:
        Q = np.broadcast_to(Q, (X.shape[0],) + Q.shape)
    if np.all(np.linalg.norm(Q, axis=(-2, -1)) > 0):
        out["con1_ratio"] = float(np.mean(theory.condition1_ratio(params, acts, Q=Q)))
    J = jacobian(params, acts)
    out["max_re_eig"] = float(np.max(np.linalg.eigvals(-(J @ Q)).real))
    if converged:
        try:
            gW, _ = theory.grad_H_from_state(params, state, sim)
            dW, _ = steady_state_update(params, state, sim.alpha_tilde, check=False)
            out["angle_deg"] = theory.angle_deg(dW, [-g for g in gW])
        except ConditioningError:
            pass
    return out

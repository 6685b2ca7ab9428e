"""Surrogate loss, implicit-function gradients and feedback diagnostics.

The surrogate loss is the steady-state control magnitude
``H = 1/2 sum_b ||Q u_ss||^2``.  Its exact gradient follows from
differentiating the controller fixed point ``e(u, W) - alpha_tilde u = 0``;
:func:`grad_H_oracle` recomputes it by brute force (central differences
around re-simulated equilibria) so the two routes stay independent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .controller import LossFamily, LossKind, TargetKind, sample_loss, softmax
from .dynamics import SimConfig, simulate
from .errors import ConditioningError, ShapeError
from .netcore import (LayerParams, NetworkParams, activations_from_v, block_matrices,
                      forward_ss, jacobian, jacobian_blocks)

COND_LIMIT = 1e12


@dataclass
class GradReport:
    analytic: list
    oracle: list
    rel_errors: list
    max_rel_error: float
    angle_deg: float

    def to_dict(self):
        return {"rel_errors": [float(x) for x in self.rel_errors],
                "max_rel_error": float(self.max_rel_error),
                "angle_deg": float(self.angle_deg)}


@dataclass
class StabilityReport:
    reduced_eigs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reduced_max_real: float = float("nan")
    condition2_ok: bool = False
    full_eigs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    full_max_real: float = float("nan")

    def to_dict(self):
        def cplx(a):
            return [[float(z.real), float(z.imag)] for z in np.atleast_1d(a)]
        return {"reduced_eigs": cplx(self.reduced_eigs), "reduced_max_real": float(self.reduced_max_real),
                "condition2_ok": bool(self.condition2_ok), "full_eigs": cplx(self.full_eigs),
                "full_max_real": float(self.full_max_real)}


def vec(mats):
    return np.concatenate([np.ravel(m) for m in mats])


def angle_deg(a, b):
    """Angle in degrees between two (vectorised) update collections."""
    a, b = vec(a) if isinstance(a, (list, tuple)) else np.ravel(a), \
        vec(b) if isinstance(b, (list, tuple)) else np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    c = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def solve_equilibrium(params, X, labels, cfg: SimConfig, tol=1e-12, max_steps=500_000):
    """Noise-free steady state by simulating until the residuals fall below ``tol``."""
    cfg = cfg.replace(sigma=0.0, m_max=max_steps, learn_forward=False, learn_feedback=False,
                      record_trajectory=False)
    state, _, diag, _ = simulate(params, X, labels, cfg, tol=tol)
    return state, diag


def _Q_full(state):
    return np.concatenate(state.Q, axis=-2)


def _error_jacobian(loss, r_L):
    """``D = -de/dr_L``: identity for squared error, softmax Jacobian otherwise."""
    n = r_L.shape[-1]
    if loss is None or loss.family is LossFamily.SQUARED_ERROR:
        return np.broadcast_to(np.eye(n), r_L.shape[:-1] + (n, n))
    s = softmax(r_L)
    return s[..., :, None] * np.eye(n) - s[..., :, None] * s[..., None, :]


def surrogate_loss(params, X, labels, cfg: SimConfig, tol=1e-12):
    """``H = 1/2 sum_b ||Q u_ss^(b)||^2`` over the batch."""
    _, diag = solve_equilibrium(params, X, labels, cfg, tol=tol)
    return float(np.sum(diag.H))


def _controller_loss(cfg):
    return LossKind.squared_error() if cfg.target_mode.kind is TargetKind.NUDGED else cfg.loss


def grad_H_from_state(params, state, cfg: SimConfig):
    """Analytic ``dH/dW_i`` and ``dH/db_i`` at a converged (batched) state.

    Per sample: ``-J_i^T D^T (D J Q + a I)^{-T} Q^T Q u r_{i-1}^T`` where ``D =
    -de/dr_L`` (identity for squared error).
    """
    acts = activations_from_v(params, state.v, state.x)
    blocks = jacobian_blocks(params, acts)
    J = np.concatenate(blocks, axis=-1)
    Q = _Q_full(state)
    u = state.ctrl.u
    D = _error_jacobian(_controller_loss(cfg), state.r[-1])
    n_L = params.n_out
    M = D @ J @ Q + cfg.alpha_tilde * np.eye(n_L)
    cond = np.linalg.cond(M)
    if np.any(~np.isfinite(cond)) or np.max(cond) > COND_LIMIT:
        raise ConditioningError(float(np.max(cond)), "J Q + alpha_tilde I is (near-)singular")
    Qu = np.einsum("...ij,...j->...i", Q, u)
    g = np.einsum("...ji,...j->...i", Q, Qu)             # Q^T Q u
    z = np.linalg.solve(np.swapaxes(M, -1, -2), g[..., None])[..., 0]
    z = np.einsum("...ji,...j->...i", D, z)               # D^T z
    gW, gb = [], []
    for i, Ji in enumerate(blocks):
        s = -np.einsum("...ji,...j->...i", Ji, z)         # -J_i^T z, per sample
        pre = state.r_in(i)
        gW.append(np.einsum("bi,bj->ij", np.atleast_2d(s), np.atleast_2d(pre)))
        gb.append(np.atleast_2d(s).sum(axis=0))
    return gW, gb


def grad_H_analytic(params, X, labels, cfg: SimConfig, tol=1e-12):
    state, _ = solve_equilibrium(params, X, labels, cfg, tol=tol)
    return grad_H_from_state(params, state, cfg)


def _perturbed_batch(params, B, deltas):
    """Stack per-perturbation parameter copies, each repeated for B samples.

    ``deltas`` is a list of (layer, kind, index, value); returns params with
    a leading axis of length ``len(deltas) * B``.
    """
    P = len(deltas)
    layers = []
    for i, layer in enumerate(params.layers):
        W = np.repeat(layer.W[None], P, axis=0)
        b = np.repeat(layer.b[None], P, axis=0)
        for p, (li, kind, idx, val) in enumerate(deltas):
            if li != i:
                continue
            if kind == "W":
                W[(p,) + idx] += val
            else:
                b[(p,) + idx] += val
        layers.append(LayerParams(W=np.repeat(W, B, axis=0), b=np.repeat(b, B, axis=0),
                                  Q=layer.Q, activation=layer.activation))
    return NetworkParams(tuple(layers))


def grad_H_oracle(params, X, labels, cfg: SimConfig, h=1e-5, tol=1e-13, max_steps=500_000,
                  include_bias=True):
    """Central-difference gradient of H, re-solving the equilibrium per perturbation.

    All perturbed parameter sets are simulated together as one batch with
    per-sample weights.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.atleast_2d(np.asarray(labels, dtype=float))
    B = X.shape[0]
    entries = []
    for i, layer in enumerate(params.layers):
        for idx in np.ndindex(layer.W.shape):
            entries.append((i, "W", idx))
        if include_bias:
            for idx in np.ndindex(layer.b.shape):
                entries.append((i, "b", idx))
    deltas = []
    for (i, kind, idx) in entries:
        deltas.append((i, kind, idx, +h))
        deltas.append((i, kind, idx, -h))
    pp = _perturbed_batch(params, B, deltas)
    P = len(deltas)
    Xr = np.tile(X, (P, 1))
    Yr = np.tile(labels, (P, 1))
    _, diag = solve_equilibrium(pp, Xr, Yr, cfg, tol=tol, max_steps=max_steps)
    Hs = diag.H.reshape(P, B).sum(axis=1)
    gW = [np.zeros(layer.W.shape) for layer in params.layers]
    gb = [np.zeros(layer.b.shape) for layer in params.layers]
    for n, (i, kind, idx) in enumerate(entries):
        g = (Hs[2 * n] - Hs[2 * n + 1]) / (2 * h)
        (gW if kind == "W" else gb)[i][idx] = g
    return gW, gb


def compare_gradients(analytic, oracle):
    rel = []
    for a, o in zip(analytic, oracle):
        no = np.linalg.norm(o)
        rel.append(np.linalg.norm(a - o) / no if no > 0 else np.linalg.norm(a - o))
    return GradReport(analytic=analytic, oracle=oracle, rel_errors=rel,
                      max_rel_error=float(max(rel)), angle_deg=angle_deg(analytic, oracle))


def ideal_feedback(params, acts):
    """Per-layer ``Q_i = (dr_L/dv_i)^T`` at the given activity."""
    return [np.swapaxes(B, -1, -2) for B in jacobian_blocks(params, acts)]


def condition1_ratio(params, acts, Q=None, ridge=1e-10):
    """``||P Q||_F / ||Q||_F`` with ``P`` the projector onto the row space of J.

    ``Q`` defaults to the concatenated feedback weights of ``params``.  A
    ridge is added to ``J J^T`` only if it is (near-)singular.
    """
    J = jacobian(params, acts)
    Q = params.Q_full() if Q is None else np.asarray(Q, dtype=float)
    nQ = np.linalg.norm(Q, axis=(-2, -1))
    if np.any(nQ == 0):
        raise ValueError("condition-1 ratio undefined for Q = 0")
    JJt = J @ np.swapaxes(J, -1, -2)
    if np.max(np.linalg.cond(JJt)) > COND_LIMIT:
        JJt = JJt + ridge * np.eye(J.shape[-2])
    PQ = np.swapaxes(J, -1, -2) @ np.linalg.solve(JJt, J @ Q)
    return np.linalg.norm(PQ, axis=(-2, -1)) / nQ


def condition2_check(params, acts, alpha, Q=None):
    """Eigenvalues of ``-J Q``; Condition 2 holds when all real parts are below ``alpha``."""
    J = jacobian(params, acts)
    Q = params.Q_full() if Q is None else np.asarray(Q, dtype=float)
    if J.ndim != 2:
        raise ShapeError("activations", "single sample", J.shape)
    eigs = np.linalg.eigvals(-(J @ Q))
    mr = float(np.max(eigs.real))
    return StabilityReport(reduced_eigs=eigs, reduced_max_real=mr, condition2_ok=mr < alpha)


def full_stability_jacobian(params, acts, cfg: SimConfig, Q=None, loss=None):
    """Jacobian of the full network/PI-controller dynamics at ``acts``.

    Parametrised as in the simulator (``tau_u du_int/dt = e - alpha_tilde u``,
    ``u = u_int + k e``), so ``tau_u`` plays the role of the effective
    controller time constant.
    """
    Wb, S, dphi = block_matrices(params, acts)
    Q = params.Q_full() if Q is None else np.asarray(Q, dtype=float)
    N, n_L = Q.shape
    D = _error_jacobian(loss, acts.r[-1]) if loss is not None else np.eye(n_L)
    Sp = D @ S @ dphi
    I_N = np.eye(N)
    leak = I_N - Wb @ dphi
    tv, tu, k, a = cfg.tau_v, cfg.tau_u, cfg.k, cfg.alpha_tilde
    top = np.hstack([leak / tv, -Q / tv])
    bottom = np.hstack([Sp / tu - (k / tv) * Sp @ leak, (k / tv) * Sp @ Q + (a / tu) * np.eye(n_L)])
    A = -np.vstack([top, bottom])
    eigs = np.linalg.eigvals(A)
    red = condition2_check(params, acts, cfg.alpha_tilde, Q)
    red.full_eigs = eigs
    red.full_max_real = float(np.max(eigs.real))
    return A, red


def scaled_jacobian_identity(params, acts, a):
    """Max |LHS - RHS| of ``J (aI - W phi')^{-1} (I - W phi') = [a^{-L} J_1, ..., a^{-1} J_L]``."""
    if a == 0:
        raise ValueError("scaled Jacobian identity requires a != 0")
    Wb, _, dphi = block_matrices(params, acts)
    blocks = jacobian_blocks(params, acts)
    J = np.concatenate(blocks, axis=-1)
    N = J.shape[-1]
    Wp = Wb @ dphi
    lhs = J @ np.linalg.solve(a * np.eye(N) - Wp, np.eye(N) - Wp)
    L = len(blocks)
    rhs = np.concatenate([a ** (-(L - i)) * Bi for i, Bi in enumerate(blocks)], axis=-1)
    return float(np.max(np.abs(lhs - rhs)))


def lemma_s2_gap(J, Q, alpha):
    """``||(J Q + alpha I)^{-1} J - Q^+||_F`` (pseudoinverse of Q)."""
    n = J.shape[0]
    return float(np.linalg.norm(np.linalg.solve(J @ Q + alpha * np.eye(n), J) - np.linalg.pinv(Q)))


def training_loss(params, X, labels, loss: LossKind):
    """Sum over the batch of the loss at the controller-free output."""
    out = forward_ss(params, X).output
    return float(np.sum(sample_loss(loss, labels, out)))

"""Euler-Maruyama simulation of the coupled network / controller / noise system.

The integrator follows the step ordering used for Strong-DFC: the
controller is updated first from the current output error, then layers
1..L are updated in order, each reading the already-updated previous layer
and the freshly updated control signal.  Low-pass filters read the current
(updated) values.  Noise only enters the feedback compartment.

Everything is vectorised over a batch of independent samples; each sample
draws its noise from its own stream so results do not depend on how
samples are grouped into batches.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import plasticity as _plast
from .controller import (ControllerState, LossKind, TargetKind, TargetMode,
                         control_error, controller_step, nudged_target)
from .errors import DivergenceError, ShapeError
from .netcore import NetworkParams, activations_from_v, affine, forward_ss, jacobian_blocks

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    dt: float = 0.02
    m_max: int = 1000
    tau_v: float = 0.2
    tau_u: float = 1.0
    tau_eps: float = 0.2
    tau_f: float = 10.0
    sigma: float = 0.0
    k: float = 0.0
    alpha_tilde: float = 1e-3
    target_mode: TargetMode = field(default_factory=TargetMode.strong)
    loss: LossKind = field(default_factory=LossKind.squared_error)
    noise_seed: int = 0
    record_trajectory: bool = False
    blowup: float = 1e6
    # plasticity switches used while simulating
    learn_forward: bool = False
    learn_feedback: bool = False
    debias: bool = True
    beta: float = 1e-4
    fb_scaling: bool = True
    # per-sample Q = J^T at the current activity (idealised feedback)
    ideal_feedback: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("tau_v", "tau_u", "tau_eps", "tau_f"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if int(self.m_max) < 1:
            raise ValueError("m_max must be at least 1")
        if self.alpha_tilde < 0 or self.k < 0:
            raise ValueError("alpha_tilde and k must be non-negative")
        if self.dt > min(self.tau_v, self.tau_eps) / 2:
            warnings.warn(f"dt={self.dt} exceeds half the fastest time constant; "
                          "the integrator may be inaccurate", RuntimeWarning, stacklevel=2)

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class SimState:
    """Time-varying quantities of a batch of samples.

    ``r_bar`` has L+1 entries: index 0 is the (filtered) input, index i the
    filtered rate of layer i.  ``v_fb_prev`` holds the feedback compartment
    of the previous step, which the feedback rule pairs with the current
    high-passed control signal.
    """
    x: np.ndarray
    target: np.ndarray
    v: list
    r: list
    v_ff: list
    v_fb: list
    v_fb_prev: list
    eps: list
    ctrl: ControllerState
    u_bar: np.ndarray
    r_bar: list
    Q: list
    step: int = 0
    filters_ready: bool = False

    def r_in(self, i):
        """Presynaptic rate of layer i (0-based): the input or the previous layer."""
        return self.x if i == 0 else self.r[i - 1]

    @property
    def u(self):
        return self.ctrl.u

    @property
    def u_hp(self):
        return self.ctrl.u - self.u_bar


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    v_norms: list = field(default_factory=list)
    u_norm: list = field(default_factory=list)
    e_norm: list = field(default_factory=list)
    h_integrand: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path, sample=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            L = len(self.v_norms[0]) if self.v_norms else 0
            w.writerow(["step"] + [f"v{i + 1}_norm" for i in range(L)] + ["u_norm", "e_norm"])
            for m, vn, un, en in zip(self.steps, self.v_norms, self.u_norm, self.e_norm):
                w.writerow([m] + [repr(float(x[sample])) for x in vn]
                           + [repr(float(un[sample])), repr(float(en[sample]))])


@dataclass
class Diagnostics:
    """Per-sample summary of a finished simulation (arrays over the batch)."""
    e: np.ndarray
    u: np.ndarray
    H: np.ndarray
    fixed_point_residual: np.ndarray
    equilibrium_residual: np.ndarray  # (B, L)
    fb_ff_ratio: np.ndarray
    diverged: np.ndarray
    diverged_step: np.ndarray
    steps: int

    @property
    def n_diverged(self):
        return int(np.sum(self.diverged))


def ou_step(eps, dt, tau_eps, rng=None, dbeta=None):
    """One Euler-Maruyama step of ``tau_eps d eps = -eps dt + dW``.

    Pass either a generator ``rng`` or pre-drawn standard normals ``dbeta``.
    """
    if dbeta is None:
        dbeta = rng.standard_normal(np.shape(eps))
    return eps + (-eps * dt + np.sqrt(dt) * dbeta) / tau_eps


def lowpass_step(y_bar, y_new, dt, tau_f):
    """Exponential moving average step ``y_bar += dt/tau_f (y_new - y_bar)``."""
    return y_bar + (dt / tau_f) * (y_new - y_bar)


class NoiseStreams:
    """Standard-normal increments from one independent stream per sample.

    Stream b is seeded from ``(seed, *keys[b])``; increments for a sample
    depend only on that key and the step index, never on batch layout.
    """

    def __init__(self, seed, keys, width, chunk=256):
        self.gens = [np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, np.atleast_1d(k))]))
                     for k in keys]
        self.width = width
        self.chunk = chunk
        self._buf = None
        self._pos = chunk

    def next(self):
        if self._pos >= self.chunk:
            self._buf = np.stack([g.standard_normal((self.chunk, self.width)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def _as_batch(a, n):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != n:
        raise ShapeError("batch array", f"(B, {n})", a.shape)
    return a


def ideal_Q(params: NetworkParams, v_list, x):
    """Per-sample feedback weights ``Q_i = (dr_L/dv_i)^T`` at the given potentials."""
    blocks = jacobian_blocks(params, activations_from_v(params, v_list, x))
    return [np.swapaxes(B, -1, -2) for B in blocks]


def ideal_feedback_input(params: NetworkParams, r_list, u):
    """``J_i^T u`` for every layer by a backward pass, without forming ``J``.

    Takes the rates ``r_i = phi(v_i)``.
    """
    L = params.depth
    out = [None] * L
    g = u * params.layers[-1].activation.dphi_from_rate(r_list[-1])
    out[-1] = g
    for i in range(L - 2, -1, -1):
        g = (g @ params.layers[i + 1].W) * params.layers[i].activation.dphi_from_rate(r_list[i])
        out[i] = g
    return out


def effective_target(cfg: SimConfig, params: NetworkParams, labels, acts_ff):
    """Output target the controller tracks, plus the loss used for the error."""
    if cfg.target_mode.kind is TargetKind.NUDGED:
        tgt = nudged_target(cfg.loss, labels, acts_ff.output, cfg.target_mode.lam)
        return tgt, LossKind.squared_error()
    return labels, cfg.loss


def init_state(params: NetworkParams, X, target, cfg: SimConfig, acts_ff=None) -> SimState:
    """Network at the feedforward prediction, controller and noise at rest."""
    if acts_ff is None:
        acts_ff = forward_ss(params, X)
    B = X.shape[0]
    n_L = params.n_out
    v = [a.copy() for a in acts_ff.v]
    r = [a.copy() for a in acts_ff.r]
    v_ff = [a.copy() for a in acts_ff.v]
    zeros = [np.zeros_like(a) for a in v]
    if cfg.ideal_feedback:
        Q = ideal_Q(params, v, X)
    else:
        Q = [layer.Q for layer in params.layers]
    return SimState(x=X, target=target, v=v, r=r, v_ff=v_ff,
                    v_fb=[z.copy() for z in zeros], v_fb_prev=[z.copy() for z in zeros],
                    eps=[z.copy() for z in zeros],
                    ctrl=ControllerState.zeros((B, n_L)), u_bar=np.zeros((B, n_L)),
                    r_bar=[X.copy()] + [a.copy() for a in r], Q=Q)


def _residuals(params, state, loss, cfg):
    e = control_error(loss, state.target, state.r[-1])
    fp = np.linalg.norm(e - cfg.alpha_tilde * state.u, axis=-1)
    eq = []
    r_prev = state.x
    for i, layer in enumerate(params.layers):
        pred = affine(layer.W, r_prev) + layer.b + affine(state.Q[i], state.u)
        eq.append(np.linalg.norm(state.v[i] - pred, axis=-1))
        r_prev = state.r[i]
    return e, fp, np.stack(eq, axis=-1)


def simulate(params: NetworkParams, X, labels, cfg: SimConfig, *, noise_keys=None,
             tol: Optional[float] = None, on_diverge="abort", check_every=25,
             state: Optional[SimState] = None):
    """Simulate a batch of samples for ``cfg.m_max`` steps.

    Returns ``(state, buffer, diagnostics, trajectory)``.  ``buffer`` holds
    the plasticity increments averaged over steps and over non-diverged
    samples (or ``None`` when no plasticity is switched on).

    Passing a previous ``state`` continues that simulation instead of
    starting from the feedforward prediction (the target is kept as is).

    With ``tol`` set (noise-free runs only) the loop stops early once every
    sample's fixed-point and layer-equilibrium residuals are below ``tol``.
    ``on_diverge`` is ``"abort"`` (raise :class:`DivergenceError`) or
    ``"skip"`` (freeze the sample and exclude it from the buffer).
    """
    X = _as_batch(X, params.layers[0].n_in)
    labels = _as_batch(labels, params.n_out)
    if X.shape[0] != labels.shape[0]:
        raise ShapeError("labels", X.shape[0], labels.shape[0])
    B = X.shape[0]
    L = params.depth
    sizes = [layer.n_out for layer in params.layers]
    acts_ff = forward_ss(params, X)
    target, loss = effective_target(cfg, params, labels, acts_ff)
    fresh = state is None
    if fresh:
        state = init_state(params, X, target, cfg, acts_ff)
    else:
        target = state.target
        if not cfg.ideal_feedback:
            state.Q = [layer.Q for layer in params.layers]

    noisy = cfg.sigma > 0
    if noisy:
        keys = np.arange(B) if noise_keys is None else noise_keys
        noise = NoiseStreams(cfg.noise_seed, keys, sum(sizes))
        offs = np.concatenate([[0], np.cumsum(sizes)])

    buffer = None
    if cfg.learn_forward or cfg.learn_feedback:
        buffer = _plast.UpdateBuffer.zeros_like(params)
    fb_scale = [(1.0 + cfg.tau_v / cfg.tau_eps) ** (L - 1 - i) if cfg.fb_scaling else 1.0
                for i in range(L)]

    alive = np.ones(B, dtype=bool)
    div_step = np.full(B, -1)
    traj = Trajectory() if cfg.record_trajectory else None
    a_v = cfg.dt / cfg.tau_v
    steps = 0
    for m in range(int(cfg.m_max)):
        e = control_error(loss, target, state.r[-1])
        state.ctrl = controller_step(state.ctrl, e, cfg.dt, cfg.tau_u, cfg.alpha_tilde, cfg.k)
        u = state.ctrl.u
        # the filters only feed plasticity, so they are left idle without it;
        # they start from the current values the first time plasticity runs
        if buffer is not None:
            if not state.filters_ready:
                state.u_bar = u.copy()
                state.r_bar = [X.copy()] + [r.copy() for r in state.r]
                state.filters_ready = True
            else:
                state.u_bar = lowpass_step(state.u_bar, u, cfg.dt, cfg.tau_f)
        fb_ideal = ideal_feedback_input(params, state.r, u) if cfg.ideal_feedback else None
        dbeta = noise.next() if noisy else None
        r_prev = X
        for i, layer in enumerate(params.layers):
            v_fb = fb_ideal[i] if fb_ideal is not None else affine(state.Q[i], u)
            if noisy:
                state.eps[i] = ou_step(state.eps[i], cfg.dt, cfg.tau_eps,
                                       dbeta=dbeta[:, offs[i]:offs[i + 1]])
                v_fb = v_fb + cfg.sigma * state.eps[i]
            state.v_fb_prev[i] = state.v_fb[i]
            state.v_fb[i] = v_fb
            state.v_ff[i] = affine(layer.W, r_prev) + layer.b
            state.v[i] = state.v[i] + a_v * (state.v_ff[i] + v_fb - state.v[i])
            state.r[i] = layer.activation.phi(state.v[i])
            if buffer is not None:
                state.r_bar[i + 1] = lowpass_step(state.r_bar[i + 1], state.r[i], cfg.dt, cfg.tau_f)
            r_prev = state.r[i]
        state.step = m + 1
        steps = m + 1

        bad = ~(np.max(np.abs(np.concatenate(state.v, axis=-1)), axis=-1) <= cfg.blowup) & alive
        bad |= ~np.all(np.isfinite(state.ctrl.u), axis=-1) & alive
        if np.any(bad):
            idx = np.flatnonzero(bad)
            if on_diverge == "abort":
                raise DivergenceError(m + 1, f"sample(s) {idx.tolist()} exceeded |v| <= {cfg.blowup:g} "
                                             "or became non-finite")
            log.debug("samples %s diverged at step %d", idx.tolist(), m + 1)
            alive &= ~bad
            div_step[idx] = m + 1
        if not alive.all():
            _freeze(state, params, acts_ff, np.flatnonzero(~alive))

        if buffer is not None:
            w = alive.astype(float) if not alive.all() else None
            for i in range(L):
                if cfg.learn_forward:
                    dW, db = _plast.forward_increment(state, params, i, cfg.debias, weights=w)
                    buffer.dW[i] += dW
                    buffer.db[i] += db
                if cfg.learn_feedback:
                    n_alive = float(alive.sum())
                    buffer.dQ[i] += _plast.feedback_increment(
                        state, i, params.layers[i].Q, fb_scale[i], cfg.beta, weights=w, n=n_alive)
            buffer.steps_accumulated += 1

        if traj is not None:
            traj.steps.append(m + 1)
            traj.v_norms.append([np.linalg.norm(v, axis=-1) for v in state.v])
            traj.u_norm.append(np.linalg.norm(u, axis=-1))
            traj.e_norm.append(np.linalg.norm(e, axis=-1))
            Qu = np.concatenate(fb_ideal if fb_ideal is not None
                                else [affine(Qi, u) for Qi in state.Q], axis=-1)
            traj.h_integrand.append(0.5 * np.sum(Qu ** 2, axis=-1))

        if tol is not None and not noisy and (m + 1) % check_every == 0:
            if cfg.ideal_feedback:
                state.Q = ideal_Q(params, state.v, X)
            _, fp, eq = _residuals(params, state, loss, cfg)
            if np.all(fp[alive] < tol) and np.all(eq[alive] < tol):
                break

    if cfg.ideal_feedback:
        state.Q = ideal_Q(params, state.v, X)
    e, fp, eq = _residuals(params, state, loss, cfg)
    u = state.ctrl.u
    Qu = np.concatenate([affine(Qi, u) for Qi in state.Q], axis=-1)
    vff = np.concatenate(state.v_ff, axis=-1)
    H = 0.5 * np.sum(Qu ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.linalg.norm(Qu, axis=-1) / np.linalg.norm(vff, axis=-1)
    diag = Diagnostics(e=e, u=u.copy(), H=H, fixed_point_residual=fp, equilibrium_residual=eq,
                       fb_ff_ratio=ratio, diverged=~alive, diverged_step=div_step, steps=steps)
    if buffer is not None:
        buffer.finalize(max(int(alive.sum()), 1))
    return state, buffer, diag, traj


def _freeze(state, params, acts_ff, idx):
    """Reset diverged samples to their feedforward state with the controller off."""
    for i in range(params.depth):
        for arr, src in ((state.v, acts_ff.v), (state.r, acts_ff.r), (state.v_ff, acts_ff.v)):
            arr[i][idx] = src[i][idx]
        for arr in (state.v_fb, state.v_fb_prev, state.eps):
            arr[i][idx] = 0.0
        state.r_bar[i + 1][idx] = acts_ff.r[i][idx]
    state.ctrl.u[idx] = 0.0
    state.ctrl.u_int[idx] = 0.0
    state.u_bar[idx] = 0.0


def simulate_sample(params: NetworkParams, x, label, cfg: SimConfig, sample_key=0, **kw):
    """Single-sample convenience wrapper around :func:`simulate`."""
    x = np.asarray(x, dtype=float)
    label = np.asarray(label, dtype=float)
    if x.ndim != 1 or label.ndim != 1:
        raise ShapeError("simulate_sample input", "1-D x and label", (x.shape, label.shape))
    return simulate(params, x[None], label[None], cfg, noise_keys=[sample_key], **kw)

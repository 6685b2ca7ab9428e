"""Training loops for every method, feedback pre-training and parameter I/O."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import theory
from ..data import Dataset, generate_student_teacher, load_idx
from ..controller import ControllerState
from ..dynamics import init_state, simulate
from ..errors import ConfigError, DivergenceError
from ..netcore import ActivationKind, LayerParams, NetworkParams, forward_ss, init_network
from ..plasticity import Optimizer, apply_updates, steady_state_update
from .baselines import loss_gradients
from .config import Method, RunConfig, write_config
from .metrics import DiagnosticsRecord, MetricsWriter, dataset_loss, probe_metrics

log = logging.getLogger(__name__)

# stream tags keep noise of different phases disjoint
_TRAIN_STREAM, _PRETRAIN_STREAM = 0, 1


def save_params(path, params: NetworkParams):
    arrays = {}
    for i, layer in enumerate(params.layers):
        arrays[f"W{i}"], arrays[f"b{i}"], arrays[f"Q{i}"] = layer.W, layer.b, layer.Q
        arrays[f"act{i}"] = np.array(layer.activation.value)
    np.savez(path, **arrays)


def load_params(path) -> NetworkParams:
    with np.load(path) as z:
        L = sum(1 for k in z.files if k.startswith("W"))
        return NetworkParams(tuple(
            LayerParams(W=z[f"W{i}"], b=z[f"b{i}"], Q=z[f"Q{i}"],
                        activation=ActivationKind.parse(str(z[f"act{i}"]))) for i in range(L)))


def init_params(cfg: RunConfig) -> NetworkParams:
    if cfg["run.init_params"]:
        params = load_params(cfg["run.init_params"])
        if params.sizes != list(cfg["net.sizes"]):
            raise ConfigError(f"run.init_params sizes {params.sizes} != net.sizes {list(cfg['net.sizes'])}")
        return params
    sizes = cfg["net.sizes"]
    acts = [cfg["net.hidden_activation"]] * (len(sizes) - 2) + [cfg["net.output_activation"]]
    return init_network(sizes, activations=acts, seed=cfg["run.seed"])


@dataclass
class Data:
    train: Dataset
    val: Dataset | None
    test: Dataset | None = None

    def train_for_epoch(self, cfg: RunConfig, epoch):
        if cfg["data.kind"] == "teacher" and cfg["data.regenerate"] and epoch > 0:
            return generate_student_teacher(cfg.teacher_spec(), cfg["data.n_train"],
                                            cfg["run.seed"], regenerate_per_epoch=True, epoch=epoch)
        return self.train


def load_data(cfg: RunConfig) -> Data:
    if cfg["data.kind"] == "teacher":
        spec = cfg.teacher_spec()
        train = generate_student_teacher(spec, cfg["data.n_train"], cfg["run.seed"])
        # validation inputs come from a separate seed stream
        val = generate_student_teacher(spec, cfg["data.n_val"], [cfg["run.seed"], 10**6],
                                       split="val") if cfg["data.n_val"] > 0 else None
        return Data(train=train, val=val)
    for key in ("data.train_images", "data.train_labels"):
        if not cfg[key]:
            raise ConfigError(f"{key} is required for data.kind = idx")
    full = load_idx(cfg["data.train_images"], cfg["data.train_labels"], val_size=cfg["data.val_size"])
    train, val = full.subset("train"), full.subset("val")
    if cfg["data.n_train"]:
        train = train.take(np.arange(min(cfg["data.n_train"], len(train))))
    test = None
    if cfg["data.test_images"] and cfg["data.test_labels"]:
        test = load_idx(cfg["data.test_images"], cfg["data.test_labels"], split="test")
        if cfg["data.n_test"]:
            test = test.take(np.arange(min(cfg["data.n_test"], len(test))))
    return Data(train=train, val=val if len(val) else None, test=test)


def _batches(n, batch_size, seed, epoch):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch]))
    order = rng.permutation(n)
    bs = n if batch_size <= 0 else batch_size
    return [order[s:s + bs] for s in range(0, n, bs)]


def _noise_keys(stream, epoch, idx):
    return np.stack([np.full(len(idx), stream), np.full(len(idx), epoch), idx], axis=1)


@dataclass
class StepResult:
    params: NetworkParams
    n_diverged: int = 0


class EquilibriumCache:
    """Last equilibrium (v, u, u_int) of every training sample.

    The noise-free fixed point depends only on the parameters, so starting
    the next solve from the previous one gives the same update in far fewer
    steps.  Samples without an entry start from the feedforward state.
    """

    def __init__(self, n_samples):
        self.n = n_samples
        self.v = None
        self.u = None
        self.u_int = None
        self.valid = np.zeros(n_samples, dtype=bool)

    def warm_state(self, params, X, Y, sim, idx):
        if not self.valid[idx].all():
            return None
        state = init_state(params, X, Y, sim)
        state.v = [v[idx].copy() for v in self.v]
        state.r = [l.activation.phi(v) for l, v in zip(params.layers, state.v)]
        state.ctrl = ControllerState(u=self.u[idx].copy(), u_int=self.u_int[idx].copy())
        return state

    def store(self, state, idx, ok):
        if self.v is None:
            self.v = [np.zeros((self.n, v.shape[-1])) for v in state.v]
            self.u = np.zeros((self.n, state.ctrl.u.shape[-1]))
            self.u_int = np.zeros_like(self.u)
        for c, v in zip(self.v, state.v):
            c[idx] = v
        self.u[idx] = state.ctrl.u
        self.u_int[idx] = state.ctrl.u_int
        self.valid[idx] = ok


def _equilibrium(params, X, Y, sim, cfg, policy, state=None):
    sim = sim.replace(sigma=0.0, m_max=cfg["run.eq_max_steps"], learn_forward=False,
                      learn_feedback=False)
    state, _, diag, _ = simulate(params, X, Y, sim, tol=cfg["run.eq_tol"], on_diverge=policy,
                                 state=state)
    return state, diag


def ideal_step(params, X, Y, sim, cfg, opt, policy, cache=None, idx=None):
    """Steady-state update at the noise-free equilibrium with ``Q = J^T``."""
    warm = cache.warm_state(params, X, Y, sim, idx) if cache is not None else None
    state, diag = _equilibrium(params, X, Y, sim, cfg, policy, state=warm)
    if cache is not None:
        cache.store(state, idx, ~diag.diverged & (diag.fixed_point_residual < 1e-6))
    alive = ~diag.diverged
    if not alive.any():
        return StepResult(params, int(diag.n_diverged))
    bad = diag.fixed_point_residual[alive] > 1e-6
    if np.any(bad) and policy == "abort":
        raise DivergenceError(diag.steps, f"{int(bad.sum())} sample(s) did not reach equilibrium "
                                          f"within {cfg['run.eq_max_steps']} steps")
    dW, db = steady_state_update(params, state, sim.alpha_tilde, check=False)
    # frozen (diverged) samples contribute zero; renormalise to the alive count
    c = len(alive) / alive.sum()
    new = NetworkParams(tuple(
        LayerParams(W=l.W + opt.config.lr_forward * c * opt._transform(("W", i), w),
                    b=l.b + opt.config.lr_forward * c * opt._transform(("b", i), b),
                    Q=l.Q, activation=l.activation)
        for i, (l, w, b) in enumerate(zip(params.layers, dW, db))))
    return StepResult(new, int(diag.n_diverged))


def dynamic_step(params, X, Y, sim, keys, opt, policy, learn_forward, learn_feedback,
                 forward_scale=1.0):
    """One simulation window with always-on plasticity, then apply the buffer."""
    sim = sim.replace(learn_forward=learn_forward, learn_feedback=learn_feedback)
    _, buf, diag, _ = simulate(params, X, Y, sim, noise_keys=keys, on_diverge=policy)
    if diag.diverged.all():
        return StepResult(params, int(diag.n_diverged))
    if forward_scale != 1.0:
        buf = buf.scaled(c_forward=forward_scale)
    new = apply_updates(params, buf, opt, update_forward=learn_forward, update_feedback=learn_feedback)
    return StepResult(new, int(diag.n_diverged))


def bp_step(params, X, Y, loss, opt, shallow=False):
    gW, gb = loss_gradients(params, X, Y, loss)
    L = params.depth
    layers = []
    for i, l in enumerate(params.layers):
        if shallow and i < L - 1:
            layers.append(l)
            continue
        W = l.W - opt.config.lr_forward * opt._transform(("W", i), gW[i])
        b = l.b - opt.config.lr_forward * opt._transform(("b", i), gb[i])
        layers.append(LayerParams(W=W, b=b, Q=l.Q, activation=l.activation))
    return StepResult(NetworkParams(tuple(layers)))


def train_step(cfg: RunConfig, params, X, Y, keys, opt, cache=None):
    m = cfg.method
    sim = cfg.sim_config()
    policy = cfg.on_diverge()
    if m is Method.STRONG_DFC_IDEAL:
        return ideal_step(params, X, Y, sim, cfg, opt, policy, cache, keys[:, 2])
    if m is Method.STRONG_DFC:
        return dynamic_step(params, X, Y, sim, keys, opt, policy, True, True)
    if m is Method.DFC:
        # weak-feedback updates scale with lam; undo it so learning rates are comparable
        return dynamic_step(params, X, Y, sim, keys, opt, policy, True, True,
                            forward_scale=1.0 / sim.target_mode.lam)
    if m is Method.STRONG_DFC_TWO_PHASE:
        res = dynamic_step(params, X, Y, sim, keys, opt, policy, False, True)
        res2 = dynamic_step(res.params, X, Y, sim.replace(sigma=0.0), keys, opt, policy, True, False)
        return StepResult(res2.params, res.n_diverged + res2.n_diverged)
    return bp_step(params, X, Y, cfg.loss(), opt, shallow=m is Method.BP_SHALLOW)


@dataclass
class PretrainResult:
    params: NetworkParams
    ratios: list = field(default_factory=list)
    converged: bool = False
    warning: str | None = None


def _ff_condition1(params, X):
    acts = forward_ss(params, X)
    Q = np.broadcast_to(params.Q_full(), (X.shape[0],) + params.Q_full().shape)
    if np.linalg.norm(params.Q_full()) == 0:
        return float("nan")
    return float(np.mean(theory.condition1_ratio(params, acts, Q=Q)))


def pretrain_feedback(cfg: RunConfig, params: NetworkParams = None, data: Data = None,
                      epochs=None) -> PretrainResult:
    """Feedback-only plasticity with a large controller leak.

    Forward weights stay frozen.  Stops as soon as the condition-1 ratio on
    the probe set (at the controller-free activity) exceeds
    ``run.pretrain_threshold``.  With ``run.pretrain_target = "self"`` the
    controller target is the network's own feedforward output, so the
    control signal is driven by noise alone.
    """
    params = init_params(cfg) if params is None else params
    data = load_data(cfg) if data is None else data
    epochs = cfg["run.pretrain_epochs"] if epochs is None else epochs
    sim = cfg.sim_config().replace(alpha_tilde=cfg["run.pretrain_alpha"], ideal_feedback=False)
    policy = cfg.on_diverge()
    opt = Optimizer(cfg.optimizer_config())
    probe_X = data.train.inputs[:cfg["run.probe_size"]]
    ratios = [_ff_condition1(params, probe_X)]
    thr = cfg["run.pretrain_threshold"]
    for epoch in range(epochs):
        if ratios[-1] > thr:
            break
        train = data.train_for_epoch(cfg, epoch)
        for idx in _batches(len(train), cfg["run.batch_size"], cfg["run.seed"] + 1, epoch):
            X = train.inputs[idx]
            Y = forward_ss(params, X).output if cfg["run.pretrain_target"] == "self" else train.targets[idx]
            res = dynamic_step(params, X, Y, sim, _noise_keys(_PRETRAIN_STREAM, epoch, idx), opt,
                               policy, learn_forward=False, learn_feedback=True)
            params = res.params
        ratios.append(_ff_condition1(params, probe_X))
        log.info("pretrain epoch %d: condition-1 ratio %.4f", epoch + 1, ratios[-1])
    ok = ratios[-1] > thr
    msg = None
    if not ok:
        msg = (f"feedback pre-training stopped at ratio {ratios[-1]:.3f} "
               f"below threshold {thr} after {len(ratios) - 1} epochs")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return PretrainResult(params=params, ratios=ratios, converged=ok, warning=msg)


def _record(cfg, params, data, train_ds, epoch, n_div):
    loss = cfg.loss()
    tl, te = dataset_loss(params, train_ds, loss)
    eval_ds = data.test if data.test is not None else data.val
    vl, ve = dataset_loss(params, eval_ds, loss)
    rec = DiagnosticsRecord(epoch=epoch, train_loss=tl, val_loss=vl, train_err=te, val_err=ve,
                            diverged=n_div)
    if cfg.method.is_dynamical and cfg["run.probe_size"] > 0:
        n = min(cfg["run.probe_size"], len(data.train))
        pm = probe_metrics(params, data.train.inputs[:n], data.train.targets[:n],
                           cfg.sim_config().replace(sigma=0.0), tol=cfg["run.eq_tol"],
                           max_steps=cfg["run.eq_max_steps"])
        for k, v in pm.items():
            setattr(rec, k, v)
    return rec


def train(cfg: RunConfig, out_dir=None, params=None, data=None) -> Path:
    """Run the configured method and write ``metrics.csv``; returns its path.

    Rows are written at epoch 0 and then every ``run.metric_every`` epochs
    (plus the final epoch).  ``val_loss``/``val_err`` use the test split
    when one is configured, otherwise the validation split.
    """
    out = Path(out_dir or cfg["run.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.toml")
    data = load_data(cfg) if data is None else data
    params = init_params(cfg) if params is None else params
    if cfg.method.learns_feedback and cfg["run.pretrain_epochs"] > 0:
        params = pretrain_feedback(cfg, params, data).params
    opt = Optimizer(cfg.optimizer_config())
    cache = None
    if cfg.method is Method.STRONG_DFC_IDEAL and cfg["run.warm_start"] and not cfg["data.regenerate"]:
        cache = EquilibriumCache(len(data.train))
    path = out / "metrics.csv"
    E = cfg["run.epochs"]
    with MetricsWriter(path) as w:
        w.write(_record(cfg, params, data, data.train, 0, 0))
        n_div = 0
        for epoch in range(1, E + 1):
            train_ds = data.train_for_epoch(cfg, epoch - 1)
            for idx in _batches(len(train_ds), cfg["run.batch_size"], cfg["run.seed"], epoch):
                res = train_step(cfg, params, train_ds.inputs[idx], train_ds.targets[idx],
                                 _noise_keys(_TRAIN_STREAM, epoch, idx), opt, cache)
                params = res.params
                n_div += res.n_diverged
            if epoch % cfg["run.metric_every"] == 0 or epoch == E:
                w.write(_record(cfg, params, data, train_ds, epoch, n_div))
                log.info("epoch %d done", epoch)
                n_div = 0
    save_params(out / "params.npz", params)
    return path

"""Run configuration: a flat schema of dotted keys.

Config files are TOML restricted to dotted scalar keys, e.g.::

    run.method = "StrongDFCIdeal"
    sim.dt = 0.02
    net.sizes = [30, 50, 50, 50, 5]

Any key can be overridden from the environment as ``SDFC_<SECTION>__<KEY>``
(``SDFC_SIM__DT=0.01``); values are parsed with the key's type.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..controller import LossKind, TargetMode
from ..data import TeacherSpec
from ..dynamics import SimConfig
from ..errors import ConfigError
from ..plasticity import OptimizerConfig

ENV_PREFIX = "SDFC_"


class Method(enum.Enum):
    STRONG_DFC = "StrongDFC"
    STRONG_DFC_TWO_PHASE = "StrongDFCTwoPhase"
    STRONG_DFC_IDEAL = "StrongDFCIdeal"
    DFC = "DFC"
    BP = "BP"
    BP_SHALLOW = "BPShallow"

    @property
    def is_dynamical(self):
        return self not in (Method.BP, Method.BP_SHALLOW)

    @property
    def learns_feedback(self):
        return self in (Method.STRONG_DFC, Method.STRONG_DFC_TWO_PHASE, Method.DFC)


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v):
    if isinstance(v, str):
        v = [p for p in v.replace("[", "").replace("]", "").split(",") if p.strip()]
    return tuple(int(p) for p in v)


def _opt_str(v):
    return None if v in (None, "", "none") else str(v)


# key -> (parser, default, help)
SCHEMA = {
    "run.method": (Method, Method.STRONG_DFC_IDEAL, "training method"),
    "run.epochs": (int, 10, "number of training epochs"),
    "run.batch_size": (int, 32, "samples per update (0 = full batch)"),
    "run.seed": (int, 0, "master seed: network init, shuffling and noise"),
    "run.out_dir": (str, "runs/default", "output directory"),
    "run.metric_every": (int, 1, "epochs between diagnostic rows"),
    "run.probe_size": (int, 64, "training samples used for H / angle / condition-1 metrics"),
    "run.on_diverge": (str, "auto", "abort | skip | auto (abort if noise-free, else skip)"),
    "run.pretrain_epochs": (int, 0, "feedback pre-training epochs (learned-Q methods)"),
    "run.pretrain_alpha": (float, 1.0, "controller leak used during pre-training"),
    "run.pretrain_threshold": (float, 0.9, "stop pre-training once condition-1 ratio exceeds this"),
    "run.pretrain_target": (str, "self", "self (clamp output at its feedforward value) | label"),
    "run.init_params": (_opt_str, None, "optional .npz with initial parameters"),
    "run.warm_start": (_bool, True, "StrongDFCIdeal: start each equilibrium solve from the sample's last one"),
    "run.eq_tol": (float, 1e-9, "residual tolerance for noise-free equilibria"),
    "run.eq_max_steps": (int, 200_000, "step budget for noise-free equilibria"),
    "data.kind": (str, "teacher", "teacher | idx"),
    "data.teacher_sizes": (_int_list, (30, 10, 10, 10, 5), "teacher layer sizes"),
    "data.teacher_seed": (int, 0, "teacher weight seed"),
    "data.teacher_gain": (float, 2.0, "teacher weight gain"),
    "data.n_train": (int, 500, "training samples (teacher) or subset size (idx, 0 = all)"),
    "data.n_val": (int, 500, "validation samples (teacher)"),
    "data.n_test": (int, 0, "test samples (idx, 0 = all)"),
    "data.regenerate": (_bool, False, "draw fresh teacher samples every epoch"),
    "data.train_images": (_opt_str, None, "IDX training images"),
    "data.train_labels": (_opt_str, None, "IDX training labels"),
    "data.test_images": (_opt_str, None, "IDX test images"),
    "data.test_labels": (_opt_str, None, "IDX test labels"),
    "data.val_size": (int, 5000, "IDX training samples held out for validation"),
    "net.sizes": (_int_list, (30, 50, 50, 50, 5), "layer sizes including the input"),
    "net.hidden_activation": (str, "tanh", "hidden activation"),
    "net.output_activation": (str, "linear", "output activation"),
    "sim.dt": (float, 0.02, ""),
    "sim.m_max": (int, 1000, "simulation steps per sample (noisy / windowed runs)"),
    "sim.tau_v": (float, 0.2, ""),
    "sim.tau_u": (float, 1.0, ""),
    "sim.tau_eps": (float, 0.2, ""),
    "sim.tau_f": (float, 10.0, ""),
    "sim.sigma": (float, 0.0, "noise magnitude"),
    "sim.k": (float, 0.0, "proportional controller gain"),
    "sim.alpha_tilde": (float, 1e-3, "effective controller leak"),
    "sim.lam": (float, 0.1, "nudging strength (DFC)"),
    "sim.loss": (str, "mse", "mse | softmax_ce"),
    "sim.soft_a": (float, 0.99, "soft-target mass on the label (softmax_ce)"),
    "sim.beta": (float, 1e-4, "feedback weight decay"),
    "sim.debias": (_bool, True, "low-pass filter the presynaptic forward signal"),
    "sim.fb_scaling": (_bool, True, "(1 + tau_v/tau_eps)^(L-i) feedback compensation"),
    "sim.blowup": (float, 1e6, "divergence threshold on |v|"),
    "opt.kind": (str, "sgd", "sgd | momentum"),
    "opt.lr_forward": (float, 1e-3, ""),
    "opt.lr_feedback": (float, 1e-2, ""),
    "opt.momentum": (float, 0.0, ""),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: spec[1] for k, spec in SCHEMA.items()}
        for k, v in self.values.items():
            merged[k] = _parse(k, v)
        self.values = merged
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def replace(self, **kw):
        """Copy with overrides; keyword names use ``__`` for the dot (``sim__dt``)."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in kw.items()})
        return RunConfig(vals)

    @property
    def method(self) -> Method:
        return self.values["run.method"]

    def validate(self):
        v = self.values
        if v["run.epochs"] < 0 or v["run.batch_size"] < 0 or v["run.metric_every"] < 1:
            raise ConfigError("run.epochs / run.batch_size must be >= 0 and run.metric_every >= 1")
        if v["run.on_diverge"] not in ("abort", "skip", "auto"):
            raise ConfigError(f"run.on_diverge must be abort|skip|auto, got {v['run.on_diverge']!r}")
        if v["run.pretrain_target"] not in ("self", "label"):
            raise ConfigError("run.pretrain_target must be self|label")
        if v["data.kind"] not in ("teacher", "idx"):
            raise ConfigError(f"data.kind must be teacher|idx, got {v['data.kind']!r}")
        if len(v["net.sizes"]) < 2:
            raise ConfigError("net.sizes needs an input size and at least one layer")
        if v["data.kind"] == "teacher":
            ts = v["data.teacher_sizes"]
            if ts[0] != v["net.sizes"][0] or ts[-1] != v["net.sizes"][-1]:
                raise ConfigError("teacher and student input/output sizes differ")
        try:
            self.sim_config()
            self.optimizer_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def loss(self) -> LossKind:
        if self.values["sim.loss"] == "softmax_ce":
            return LossKind.softmax_ce(self.values["sim.soft_a"])
        if self.values["sim.loss"] == "mse":
            return LossKind.squared_error()
        raise ConfigError(f"sim.loss must be mse|softmax_ce, got {self.values['sim.loss']!r}")

    def sim_config(self) -> SimConfig:
        """Simulation settings implied by the method and the sim.* keys."""
        v = self.values
        m = self.method
        target = TargetMode.nudged(v["sim.lam"]) if m is Method.DFC else TargetMode.strong()
        sigma = 0.0 if m is Method.STRONG_DFC_IDEAL else v["sim.sigma"]
        return SimConfig(dt=v["sim.dt"], m_max=v["sim.m_max"], tau_v=v["sim.tau_v"],
                         tau_u=v["sim.tau_u"], tau_eps=v["sim.tau_eps"], tau_f=v["sim.tau_f"],
                         sigma=sigma, k=v["sim.k"], alpha_tilde=v["sim.alpha_tilde"],
                         target_mode=target, loss=self.loss(), noise_seed=v["run.seed"],
                         blowup=v["sim.blowup"], debias=v["sim.debias"], beta=v["sim.beta"],
                         fb_scaling=v["sim.fb_scaling"],
                         ideal_feedback=m is Method.STRONG_DFC_IDEAL)

    def optimizer_config(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(kind=v["opt.kind"], lr_forward=v["opt.lr_forward"],
                               lr_feedback=v["opt.lr_feedback"], momentum=v["opt.momentum"])

    def teacher_spec(self) -> TeacherSpec:
        v = self.values
        return TeacherSpec(sizes=v["data.teacher_sizes"], seed=v["data.teacher_seed"],
                           gain=v["data.teacher_gain"])

    def on_diverge(self):
        mode = self.values["run.on_diverge"]
        if mode == "auto":
            return "skip" if self.sim_config().sigma > 0 else "abort"
        return mode

    def to_toml(self):
        lines = []
        for k, val in self.values.items():
            if isinstance(val, enum.Enum):
                val = val.value
            if val is None:
                continue
            if isinstance(val, bool):
                s = "true" if val else "false"
            elif isinstance(val, str):
                s = f'"{val}"'
            elif isinstance(val, tuple):
                s = "[" + ", ".join(str(x) for x in val) + "]"
            else:
                s = repr(val)
            lines.append(f"{k} = {s}")
        return "\n".join(lines) + "\n"


def _parse(key, value):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        if parser is float and isinstance(value, str):
            return float(value)
        if parser is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{value} is not an integer")
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, val in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = val
    return out


def load_config(path=None, environ=None, **overrides) -> RunConfig:
    """Load a config file (or defaults), then apply env and keyword overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = _flatten(tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    values.update(env_overrides(environ))
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return RunConfig(values)


def schema_doc():
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for k, (_, default, help_) in SCHEMA.items():
        if isinstance(default, enum.Enum):
            default = default.value
        rows.append(f"| `{k}` | `{default}` | {help_} |")
    return "\n".join(rows)


def write_config(cfg: RunConfig, path):
    Path(path).write_text(cfg.to_toml())

"""Datasets: synthetic student-teacher regression and IDX image files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IdxParseError, ShapeError
from .netcore import ActivationKind, LayerParams, NetworkParams, forward_ss

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_VAL_SIZE = 5000


@dataclass(frozen=True)
class TeacherSpec:
    sizes: tuple = (30, 10, 10, 10, 5)
    activation: ActivationKind = ActivationKind.TANH
    seed: int = 0
    gain: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        object.__setattr__(self, "activation", ActivationKind.parse(self.activation))
        if len(self.sizes) < 2:
            raise ShapeError("teacher sizes", "at least 2 entries", self.sizes)

    def build(self) -> NetworkParams:
        """Teacher network with N(0, gain^2/fan_in) weights and zero biases.

        A gain above one pushes the tanh units out of their linear range so
        the teacher is genuinely nonlinear.  The output layer is linear, so
        its rate equals the pre-nonlinearity ``v_L`` used as the target.
        Feedback weights are unused zeros.
        """
        rng = np.random.default_rng(self.seed)
        n_L = self.sizes[-1]
        layers = []
        L = len(self.sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            act = ActivationKind.LINEAR if i == L - 1 else self.activation
            W = self.gain * rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
            layers.append(LayerParams(W=W, b=np.zeros(n_out), Q=np.zeros((n_out, n_L)),
                                      activation=act))
        return NetworkParams(tuple(layers))


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of samples.

    ``targets`` holds regression targets ``(N, n_out)`` or, for
    classification, one-hot rows built from ``labels``.  ``split`` tags each
    sample with ``"train"``, ``"val"`` or ``"test"``.
    """
    inputs: np.ndarray
    targets: np.ndarray
    labels: np.ndarray | None = None
    split: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.inputs)
        split = np.full(n, "train") if self.split is None else np.asarray(self.split)
        object.__setattr__(self, "split", split)
        for name in ("targets", "split"):
            if len(getattr(self, name)) != n:
                raise ShapeError(name, n, len(getattr(self, name)))
        if self.labels is not None and len(self.labels) != n:
            raise ShapeError("labels", n, len(self.labels))
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")
        for arr in (self.inputs, self.targets, self.labels, self.split):
            if arr is not None:
                arr.flags.writeable = False

    def __len__(self):
        return len(self.inputs)

    @property
    def is_classification(self):
        return self.labels is not None

    def take(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(inputs=self.inputs[idx], targets=self.targets[idx],
                       labels=None if self.labels is None else self.labels[idx],
                       split=self.split[idx] if split is None else np.full(len(idx), split))

    def subset(self, tag) -> "Dataset":
        return self.take(np.flatnonzero(self.split == tag))


def _onehot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def generate_student_teacher(spec: TeacherSpec, n_samples, seed, regenerate_per_epoch=False,
                             epoch=0, split="train") -> Dataset:
    """Inputs ``x ~ N(0, I)`` and teacher targets ``v_L(x)`` (pre-nonlinearity).

    With ``regenerate_per_epoch`` every epoch draws fresh inputs from a seed
    derived from ``(seed, epoch)``; otherwise ``epoch`` is ignored and the
    same samples come back each time.  ``seed`` may be an int or a
    sequence of ints (used to carve out independent streams, e.g. for a
    validation set).
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    key = [int(s) for s in np.atleast_1d(seed)]
    if regenerate_per_epoch:
        key.append(int(epoch))
    rng = np.random.default_rng(np.random.SeedSequence(key))
    teacher = spec.build()
    x = rng.standard_normal((n_samples, spec.sizes[0]))
    y = forward_ss(teacher, x).v[-1]
    return Dataset(inputs=x, targets=y, split=np.full(n_samples, split))


def _read_header(path, raw, magic, n_dims):
    need = 4 + 4 * n_dims
    if len(raw) < need:
        raise IdxParseError(path, len(raw), f"truncated header ({len(raw)} < {need} bytes)")
    got = int.from_bytes(raw[0:4], "big")
    if got != magic:
        raise IdxParseError(path, 0, f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = np.frombuffer(raw, dtype=">u4", count=n_dims, offset=4).astype(int)
    return tuple(dims), need


def _read_payload(path, raw, offset, count):
    if len(raw) - offset < count:
        raise IdxParseError(path, len(raw), f"truncated payload: need {count} bytes after "
                                            f"offset {offset}, have {len(raw) - offset}")
    if len(raw) - offset > count:
        raise IdxParseError(path, offset + count, "trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)


def read_idx_images(path):
    raw = Path(path).read_bytes()
    (n, rows, cols), off = _read_header(path, raw, IMAGE_MAGIC, 3)
    pix = _read_payload(path, raw, off, n * rows * cols)
    return pix.reshape(n, rows * cols).astype(float) / 255.0


def read_idx_labels(path):
    raw = Path(path).read_bytes()
    (n,), off = _read_header(path, raw, LABEL_MAGIC, 1)
    return _read_payload(path, raw, off, n).astype(np.int64)


def load_idx(images_path, labels_path, val_size=MNIST_VAL_SIZE, split="train",
             n_classes=10) -> Dataset:
    """Parse an IDX image/label pair into a :class:`Dataset`.

    Pixels are scaled to [0, 1].  For ``split="train"`` the last
    ``val_size`` samples are tagged ``"val"``; pass ``split="test"`` for the
    test files.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxParseError(labels_path, 4, f"label count {len(labels)} does not match "
                                            f"image count {len(images)}")
    if labels.size and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise IdxParseError(labels_path, 8 + bad, f"label {labels[bad]} out of range")
    tags = np.full(len(labels), split)
    if split == "train" and val_size:
        if val_size >= len(labels):
            raise ValueError(f"val_size {val_size} leaves no training samples")
        tags[len(labels) - val_size:] = "val"
    return Dataset(inputs=images, targets=_onehot(labels, n_classes), labels=labels, split=tags)


def write_idx_images(path, images_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    header = np.array([IMAGE_MAGIC, n, rows, cols], dtype=">u4").tobytes()
    Path(path).write_bytes(header + images_u8.tobytes())


def write_idx_labels(path, labels_u8):
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    header = np.array([LABEL_MAGIC, len(labels_u8)], dtype=">u4").tobytes()
    Path(path).write_bytes(header + labels_u8.tobytes())

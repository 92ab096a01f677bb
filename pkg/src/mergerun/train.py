"""Training harness: Nesterov SGD, the step-drop schedule, He
initialization, a deterministic epoch loop, CSV metrics, and binary
checkpoints.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import data as datamod
from .tensor import NumericError, Tensor, finite_checks, softmax_cross_entropy


class Param(NamedTuple):
    """A named trainable tensor; ``decay`` marks weight-decay eligibility."""

    name: str
    tensor: Tensor
    decay: bool


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.1
    lr_drop_points: tuple = (0.5, 0.75, 0.875)
    lr_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "float32"
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr < 0 or self.lr_factor <= 0 or self.weight_decay < 0:
            raise ValueError("learning-rate and decay hyperparameters must be non-negative")
        pts = tuple(self.lr_drop_points)
        if any(not (0.0 < p < 1.0) for p in pts):
            raise ValueError("lr_drop_points must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError("lr_drop_points must be strictly increasing")
        self.lr_drop_points = pts

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class EpochRow(NamedTuple):
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    seconds: float


METRICS_HEADER = "epoch,lr,train_loss,train_err,test_err,seconds"


@dataclass
class RunMetrics:
    """Append-only per-epoch results."""

    rows: list = field(default_factory=list)

    def append(self, row: EpochRow):
        self.rows.append(row)

    def to_csv(self):
        lines = [METRICS_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_err!r},{r.test_err!r},{r.seconds!r}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write(self.to_csv())


def lr_at(epoch, config):
    """Learning rate for an epoch: base divided by factor per passed drop.

    Drops land on floor(fraction * epochs), so the drop epoch itself
    already uses the reduced rate.
    """
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    passed = sum(1 for p in config.lr_drop_points if epoch >= int(p * config.epochs))
    return config.base_lr / config.lr_factor**passed


def he_init(shape, seed, dtype=np.float32):
    """Zero-mean normal weights with variance 2/fan_in.

    fan_in is the input width for a 2-d [D,K] weight and Cin*kh*kw for a
    4-d convolution kernel. ``seed`` may be an integer or a Generator.
    """
    shape = tuple(int(s) for s in shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if len(shape) == 2:
        fan_in = shape[0]
    else:
        fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return Tensor((std * rng.standard_normal(shape)).astype(dtype), requires_grad=True)


def sgd_nesterov_step(param, grad, velocity, lr, momentum, weight_decay):
    """One Nesterov-momentum update in the lookahead-gradient form.

    g' = grad + wd * param
    v  <- momentum * v + g'
    param <- param - lr * (g' + momentum * v)

    Returns the updated (param, velocity) arrays.
    """
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * (g + momentum * v), v


class SGD:
    """Nesterov-momentum SGD over a model's parameter records.

    Weight decay applies only to records flagged ``decay`` (conv and FC
    weights); batch-norm scales/shifts and biases are excluded.
    """

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.tensor.data) for p in self.params]

    def step(self, lr):
        for p in self.params:
            if p.tensor.grad is not None and not np.all(np.isfinite(p.tensor.grad)):
                raise NumericError(f"non-finite gradient for {p.name}; step aborted")
        for i, p in enumerate(self.params):
            grad = p.tensor.grad
            if grad is None:
                grad = np.zeros_like(p.tensor.data)
            wd = self.weight_decay if p.decay else 0.0
            p.tensor.data, self.velocities[i] = sgd_nesterov_step(
                p.tensor.data, grad, self.velocities[i], lr, self.momentum, wd
            )

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None


# ---------------------------------------------------------------------------
# checkpoints: magic "MRN1", then per-tensor records of
#   u32 name length | name utf-8 | u8 dtype tag (0=f32, 1=f64) |
#   u32 rank | u64 extents | row-major payload; all little-endian.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MRN1"
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, arrays):
    """Write named arrays (a dict or (name, array) pairs) to ``path``."""
    items = arrays.items() if isinstance(arrays, dict) else arrays
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, arr in items:
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise ValueError(f"{name}: unsupported checkpoint dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(len(encoded).to_bytes(4, "little"))
            f.write(encoded)
            f.write(bytes([_DTYPE_TAGS[arr.dtype]]))
            f.write(arr.ndim.to_bytes(4, "little"))
            for extent in arr.shape:
                f.write(int(extent).to_bytes(8, "little"))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into an ordered name -> array dict."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    out = {}
    pos = 4
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise ValueError(f"{path}: truncated record header at byte {pos}")
        name_len = int.from_bytes(blob[pos : pos + 4], "little")
        pos += 4
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        tag = blob[pos]
        pos += 1
        if tag not in _TAG_DTYPES:
            raise ValueError(f"{path}: unknown dtype tag {tag} for {name}")
        rank = int.from_bytes(blob[pos : pos + 4], "little")
        pos += 4
        shape = []
        for _ in range(rank):
            shape.append(int.from_bytes(blob[pos : pos + 8], "little"))
            pos += 8
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(shape)
        pos += nbytes
        out[name] = arr.astype(dtype.newbyteorder("="))
    return out


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model, dataset, batch_size=256):
    """Classification error (%) of the model on a dataset, eval-mode BN."""
    images = datamod.normalize(dataset.images, dataset.channel_means, dataset.channel_stds)
    wrong = 0
    for idx in _batches(len(dataset), batch_size, np.arange(len(dataset))):
        logits = model.forward(Tensor(images[idx]), training=False)
        wrong += int((logits.data.argmax(axis=1) != dataset.labels[idx]).sum())
    return 100.0 * wrong / len(dataset)


def _locate_nonfinite(model, x, labels):
    """Replay a forward pass with finite checks to name the offending op.

    Running-stat updates are frozen so the replay sees identical numbers.
    """
    for state in model.bn_states():
        state.update = False
    try:
        with finite_checks():
            logits = model.forward(Tensor(x), training=True)
            softmax_cross_entropy(logits, labels)
    finally:
        for state in model.bn_states():
            state.update = True
    raise NumericError("loss is non-finite but no op flagged; check input data")


def train_loop(model, train_set, test_set, config, out_dir=None, timer=time.perf_counter):
    """Train a model, returning per-epoch RunMetrics.

    Deterministic given config.seed. Batch composition comes from one
    fixed seeded shuffle (train-mode BN ties the loss to batch membership,
    so a frozen model must see identical batches every epoch); the
    augmentation stream still advances per epoch. Writes ``metrics.csv``
    and ``checkpoint.mrn`` under ``out_dir`` when given. A non-finite loss
    aborts with a diagnostic naming the offending op.
    """
    order_seq, aug_seq = np.random.SeedSequence(config.seed).spawn(2)
    order = np.random.default_rng(order_seq).permutation(len(train_set))
    rng = np.random.default_rng(aug_seq)
    dtype = config.np_dtype
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    means = train_set.channel_means
    stds = train_set.channel_stds
    metrics = RunMetrics()

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        t0 = timer()
        loss_sum = 0.0
        seen = 0
        wrong = 0
        for idx in _batches(len(train_set), config.batch_size, order):
            raw = train_set.images[idx]
            if config.augment:
                batch = datamod.augment(raw, rng, means, stds)
            else:
                batch = datamod.normalize(raw, means, stds)
            batch = batch.astype(dtype, copy=False)
            labels = train_set.labels[idx]
            x = Tensor(batch)
            logits = model.forward(x, training=True)
            loss = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                _locate_nonfinite(model, batch, labels)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            loss_sum += float(loss.data) * len(idx)
            wrong += int((logits.data.argmax(axis=1) != labels).sum())
            seen += len(idx)
        test_err = evaluate(model, test_set) if test_set is not None else float("nan")
        metrics.append(
            EpochRow(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / seen,
                train_err=100.0 * wrong / seen,
                test_err=test_err,
                seconds=timer() - t0,
            )
        )

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
        save_checkpoint(os.path.join(out_dir, "checkpoint.mrn"), model.state_arrays())
    return metrics

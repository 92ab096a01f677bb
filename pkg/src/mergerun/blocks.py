"""Building blocks: residual, inception-like, merge-and-run, and the
identity-skip parallel variant.

A branch is a stack of Conv-BN layers with ReLU between them; the final
layer omits its ReLU so that the skip or merge addition lands between BN
and ReLU, and a single ReLU follows the addition on each line.

The merge-and-run mapping averages the inputs of the parallel branches and
adds that average to every branch output. Written as one linear map over
the stacked lines it is a (K*d)x(K*d) matrix whose d-wide blocks all equal
(1/K) I; that matrix is idempotent, which is what lets early-block signals
reach late blocks unattenuated. ``idempotence_check`` and
``unrolled_flow_check`` verify those two facts numerically.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import (
    BatchNormState,
    DimensionError,
    Tensor,
    add,
    average_n,
    batch_norm,
    conv2d,
    relu,
)
from .train import Param, he_init


class BlockKind(enum.Enum):
    RESIDUAL = "resnet"
    INCEPTION_LIKE = "dilnet"
    MERGE_AND_RUN = "dmrnet"
    IDENTITY_PARALLEL = "identity"

    @property
    def lines(self):
        return 2 if self in (BlockKind.MERGE_AND_RUN, BlockKind.IDENTITY_PARALLEL) else 1


# ---------------------------------------------------------------------------
# layers and branches
# ---------------------------------------------------------------------------


class ConvBN:
    """Convolution (no bias) followed by batch norm, optional trailing ReLU."""

    def __init__(self, in_ch, out_ch, ksize, stride=1, relu=True, rng=None, dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.pad = ksize // 2
        self.relu = relu
        self.weight = he_init((out_ch, in_ch, ksize, ksize), rng if rng is not None else 0, dtype)
        self.gamma = Tensor(np.ones(out_ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.bn_state = BatchNormState(out_ch, dtype=dtype)

    def __call__(self, x, training=False):
        y = conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        y = batch_norm(y, self.gamma, self.beta, self.bn_state, training)
        return relu(y) if self.relu else y

    def parameters(self, prefix):
        return [
            Param(f"{prefix}.weight", self.weight, True),
            Param(f"{prefix}.gamma", self.gamma, False),
            Param(f"{prefix}.beta", self.beta, False),
        ]

    def state_arrays(self, prefix):
        return [
            (f"{prefix}.running_mean", self.bn_state.mean),
            (f"{prefix}.running_var", self.bn_state.var),
        ]


@dataclass(frozen=True)
class LayerSpec:
    ksize: int
    in_ch: int
    out_ch: int
    stride: int = 1


@dataclass(frozen=True)
class BranchSpec:
    """Declarative branch: an ordered chain of Conv-BN(-ReLU) layers."""

    layers: tuple

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("a branch needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_ch != b.in_ch:
                raise ValueError(
                    f"inconsistent channel chain: {a.out_ch} -> {b.in_ch}"
                )

    @property
    def depth(self):
        return len(self.layers)

    @staticmethod
    def plain(in_ch, out_ch, depth=2, stride=1, ksize=3):
        """Standard branch: the first layer carries the stride and width
        change, the rest map out_ch to out_ch."""
        layers = [LayerSpec(ksize, in_ch, out_ch, stride)]
        layers += [LayerSpec(ksize, out_ch, out_ch) for _ in range(depth - 1)]
        return BranchSpec(tuple(layers))

    def instantiate(self, rng, dtype=np.float32):
        return Branch(self, rng, dtype)


class Branch:
    """Instantiated branch; its trailing layer has no ReLU."""

    def __init__(self, spec: BranchSpec, rng, dtype=np.float32):
        self.spec = spec
        self.layers = [
            ConvBN(
                ls.in_ch,
                ls.out_ch,
                ls.ksize,
                stride=ls.stride,
                relu=(i < spec.depth - 1),
                rng=rng,
                dtype=dtype,
            )
            for i, ls in enumerate(spec.layers)
        ]

    @property
    def depth(self):
        return len(self.layers)

    def __call__(self, x, training=False):
        for layer in self.layers:
            x = layer(x, training)
        return x

    def parameters(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.parameters(f"{prefix}.layer{i + 1}")
        return out

    def state_arrays(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.state_arrays(f"{prefix}.layer{i + 1}")
        return out


# ---------------------------------------------------------------------------
# block forwards
# ---------------------------------------------------------------------------


def residual_forward(x, branch, projection=None, training=False, post_relu=True):
    """ReLU(H(x) + skip); the skip is identity or the given projection."""
    skip = projection(x, training) if projection is not None else x
    h = branch(x, training)
    if h.shape != skip.shape:
        raise DimensionError(
            f"residual branch output {h.shape} does not match skip {skip.shape}; "
            "a projection is required"
        )
    y = add(h, skip)
    return relu(y) if post_relu else y


def inception_like_forward(x, b0, b1, projection=None, training=False, post_relu=True):
    """ReLU(H0(x) + H1(x) + skip): two branches share one input."""
    skip = projection(x, training) if projection is not None else x
    h0 = b0(x, training)
    h1 = b1(x, training)
    if h0.shape != skip.shape or h1.shape != skip.shape:
        raise DimensionError(
            f"branch outputs {h0.shape}/{h1.shape} do not match skip {skip.shape}"
        )
    y = add(add(h0, h1), skip)
    return relu(y) if post_relu else y


def k_branch_forward(xs, branches, projections=None, training=False, post_relu=True):
    """Merge-and-run over K parallel lines.

    The merge averages the (projected) line inputs; each line adds the
    average to its branch output and applies ReLU independently.
    """
    k = len(xs)
    if k < 2:
        raise ValueError("merge-and-run needs at least two lines")
    if len(branches) != k:
        raise ValueError(f"{k} lines but {len(branches)} branches")
    if projections is not None:
        merged_in = [p(x, training) for p, x in zip(projections, xs)]
    else:
        merged_in = list(xs)
    avg = average_n(merged_in)
    ys = []
    for x, branch in zip(xs, branches):
        h = branch(x, training)
        if h.shape != avg.shape:
            raise DimensionError(
                f"branch output {h.shape} does not match merged input {avg.shape}"
            )
        y = add(h, avg)
        ys.append(relu(y) if post_relu else y)
    return ys


def merge_and_run_forward(x0, x1, b0, b1, projections=None, training=False, post_relu=True):
    """Two-line merge-and-run block; returns the pair of line outputs."""
    y0, y1 = k_branch_forward([x0, x1], [b0, b1], projections, training, post_relu)
    return y0, y1


def identity_parallel_forward(xs, branches, projections=None, training=False, post_relu=True):
    """K independent residual lines (identity skip, no cross-line mixing)."""
    ys = []
    for i, (x, branch) in enumerate(zip(xs, branches)):
        proj = projections[i] if projections is not None else None
        ys.append(residual_forward(x, branch, proj, training, post_relu))
    return ys


# ---------------------------------------------------------------------------
# block containers
# ---------------------------------------------------------------------------


class ResidualBlock:
    kind = BlockKind.RESIDUAL

    def __init__(self, branch, projection=None):
        self.branch = branch
        self.projection = projection

    def __call__(self, x, training=False, post_relu=True):
        return residual_forward(x, self.branch, self.projection, training, post_relu)

    def parameters(self, prefix):
        out = self.branch.parameters(f"{prefix}.branch0")
        if self.projection is not None:
            out += self.projection.parameters(f"{prefix}.proj0")
        return out

    def state_arrays(self, prefix):
        out = self.branch.state_arrays(f"{prefix}.branch0")
        if self.projection is not None:
            out += self.projection.state_arrays(f"{prefix}.proj0")
        return out


class InceptionLikeBlock:
    kind = BlockKind.INCEPTION_LIKE

    def __init__(self, b0, b1, projection=None):
        self.b0 = b0
        self.b1 = b1
        self.projection = projection

    def __call__(self, x, training=False, post_relu=True):
        return inception_like_forward(x, self.b0, self.b1, self.projection, training, post_relu)

    def parameters(self, prefix):
        out = self.b0.parameters(f"{prefix}.branch0")
        out += self.b1.parameters(f"{prefix}.branch1")
        if self.projection is not None:
            out += self.projection.parameters(f"{prefix}.proj0")
        return out

    def state_arrays(self, prefix):
        out = self.b0.state_arrays(f"{prefix}.branch0")
        out += self.b1.state_arrays(f"{prefix}.branch1")
        if self.projection is not None:
            out += self.projection.state_arrays(f"{prefix}.proj0")
        return out


class _ParallelBlock:
    def __init__(self, branches, projections=None):
        if projections is not None and len(projections) != len(branches):
            raise ValueError("need one projection per line")
        self.branches = list(branches)
        self.projections = list(projections) if projections is not None else None

    @property
    def k(self):
        return len(self.branches)

    def parameters(self, prefix):
        out = []
        for i, b in enumerate(self.branches):
            out += b.parameters(f"{prefix}.branch{i}")
        if self.projections is not None:
            for i, p in enumerate(self.projections):
                out += p.parameters(f"{prefix}.proj{i}")
        return out

    def state_arrays(self, prefix):
        out = []
        for i, b in enumerate(self.branches):
            out += b.state_arrays(f"{prefix}.branch{i}")
        if self.projections is not None:
            for i, p in enumerate(self.projections):
                out += p.state_arrays(f"{prefix}.proj{i}")
        return out


class MergeAndRunBlock(_ParallelBlock):
    kind = BlockKind.MERGE_AND_RUN

    def __call__(self, xs, training=False, post_relu=True):
        return k_branch_forward(xs, self.branches, self.projections, training, post_relu)


class IdentityParallelBlock(_ParallelBlock):
    kind = BlockKind.IDENTITY_PARALLEL

    def __call__(self, xs, training=False, post_relu=True):
        return identity_parallel_forward(xs, self.branches, self.projections, training, post_relu)


# ---------------------------------------------------------------------------
# the merge-and-run mapping as a dense matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MergeMapping:
    """The K-line merge-and-run skip as a (K*d)x(K*d) block matrix, every
    d-wide block equal to (1/K) I."""

    K: int
    d: int

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("merge-and-run needs K >= 2 lines")
        if self.d < 1:
            raise ValueError("line width d must be positive")

    def dense(self, dtype=np.float64):
        return (np.tile(np.eye(self.d, dtype=dtype), (self.K, self.K)) / self.K).astype(dtype)

    def dense_exact(self):
        """The same matrix with Fraction entries (exact arithmetic)."""
        inv_k = Fraction(1, self.K)
        size = self.K * self.d
        return [
            [inv_k if i % self.d == j % self.d else Fraction(0) for j in range(size)]
            for i in range(size)
        ]


def merge_matrix(K, d, dtype=np.float64):
    return MergeMapping(K, d).dense(dtype)


def idempotence_check(mapping, n):
    """max |M^n - M| for the mapping's dense matrix (0 means idempotent).

    Accepts a MergeMapping or any square matrix; powers are taken by
    repeated multiplication.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    m = mapping.dense() if isinstance(mapping, MergeMapping) else np.asarray(mapping, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    power = m
    for _ in range(n - 1):
        power = power @ m
    return float(np.abs(power - m).max())


def unrolled_flow_check(x0, x1, branch_mats):
    """Deviation between iterated merge-and-run blocks and their unrolled
    closed form, for purely linear branches.

    ``branch_mats`` is a sequence of (W0, W1) pairs, one per block; the
    lines are d-vectors and each branch is the linear map x -> W x (no BN,
    no ReLU). Iterating the block recurrence and collapsing all powers of
    the merge matrix (idempotence) must give:

        final = stack(last block's branch outputs)
                + M * sum(earlier blocks' branch outputs)
                + M * stack(initial lines)

    Returns max |iterated - closed form|.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.ndim != 1 or x0.shape != x1.shape:
        raise ValueError("lines must be equal-length vectors")
    d = x0.shape[0]
    if len(branch_mats) < 1:
        raise ValueError("need at least one block")
    for w0, w1 in branch_mats:
        for w in (w0, w1):
            w = np.asarray(w)
            if w.ndim != 2 or w.shape != (d, d):
                raise ValueError(
                    f"branches must be linear {d}x{d} maps, got shape {np.shape(w)}"
                )

    half = np.full((d,), 0.5)
    lines = (x0, x1)
    h_history = []
    for w0, w1 in branch_mats:
        avg = half * (lines[0] + lines[1])
        h = (np.asarray(w0, dtype=np.float64) @ lines[0], np.asarray(w1, dtype=np.float64) @ lines[1])
        h_history.append(h)
        lines = (h[0] + avg, h[1] + avg)
    iterated = np.concatenate(lines)

    m = merge_matrix(2, d)
    stacked_h_last = np.concatenate(h_history[-1])
    summed = np.zeros(2 * d)
    for h in h_history[:-1]:
        summed += np.concatenate(h)
    closed = stacked_h_last + m @ summed + m @ np.concatenate([x0, x1])
    return float(np.abs(iterated - closed).max())

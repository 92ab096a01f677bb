"""Exact block rewrites with numerical certificates.

Two rewrites are provided:

* widening: an inception-like block's two parallel branches (two layers
  each) become one residual branch that runs wide in the middle, d -> 2d
  -> d. The first layers concatenate along output channels; the second
  layers concatenate along input channels so the sum of the two branch
  outputs falls out of a single convolution. Because the two branches
  carry different BN affine parameters on their final layers, those are
  folded into the concatenated kernel (eval-mode BN is per-channel affine)
  and the widened final BN reduces to a pure shift.

* lowering: a merge-and-run block becomes a single block over the
  concatenated 2d-channel state, whose branch layers are group
  convolutions (equivalent to block-diagonal kernels) and whose skip is
  one dense linear map, the idempotent merge matrix.

``certify`` runs source and target on shared random probes and records the
largest forward deviation; a rewrite whose certificate exceeds tolerance
is rejected. Certificates run the blocks in eval mode so both sides use
identical affine normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import Branch, ConvBN, MergeMapping, ResidualBlock
from .tensor import (
    BatchNormState,
    DimensionError,
    Tensor,
    add,
    batch_norm,
    channel_slice,
    channel_transform,
    concat_channels,
    group_conv2d,
    relu,
)


@dataclass
class RewriteCertificate:
    source: str
    target: str
    probes: int
    max_deviation: float
    tolerance: float
    dtype: str

    @property
    def ok(self):
        return self.max_deviation <= self.tolerance


def _clone_conv_bn(weight, gamma, beta, mean, var, stride, use_relu, dtype):
    layer = ConvBN(weight.shape[1], weight.shape[0], weight.shape[2], stride=stride, relu=use_relu, dtype=dtype)
    layer.weight.data = np.ascontiguousarray(weight.astype(dtype))
    layer.gamma.data = gamma.astype(dtype)
    layer.beta.data = beta.astype(dtype)
    layer.bn_state.mean = mean.astype(dtype)
    layer.bn_state.var = var.astype(dtype)
    return layer


def _check_widenable(b0, b1):
    if b0.depth != 2 or b1.depth != 2:
        raise DimensionError(
            f"widening handles exactly two layers per branch, got {b0.depth}/{b1.depth}"
        )
    for l0, l1 in zip(b0.layers, b1.layers):
        if (l0.in_ch, l0.out_ch, l0.ksize, l0.stride) != (l1.in_ch, l1.out_ch, l1.ksize, l1.stride):
            raise DimensionError("branches must have identical layer shapes")
    if b0.layers[0].stride != 1 or b0.layers[1].stride != 1:
        raise DimensionError("widening requires shape-preserving branches (stride 1)")
    if b0.layers[0].in_ch != b0.layers[1].out_ch:
        raise DimensionError("branches must map their input width back to itself")


def widen_parallel_branches(b0: Branch, b1: Branch) -> Branch:
    """Merge two parallel two-layer branches into one wide branch.

    The result satisfies H(x) = H0(x) + H1(x) for all x with eval-mode BN,
    so a residual block over the wide branch reproduces the inception-like
    block exactly.
    """
    _check_widenable(b0, b1)
    dtype = b0.layers[0].weight.data.dtype
    l01, l02 = b0.layers
    l11, l12 = b1.layers

    first = _clone_conv_bn(
        np.concatenate([l01.weight.data, l11.weight.data], axis=0),
        np.concatenate([l01.gamma.data, l11.gamma.data]),
        np.concatenate([l01.beta.data, l11.beta.data]),
        np.concatenate([l01.bn_state.mean, l11.bn_state.mean]),
        np.concatenate([l01.bn_state.var, l11.bn_state.var]),
        stride=1,
        use_relu=True,
        dtype=dtype,
    )

    # Final layers: eval-mode BN is z -> a*z + b per channel. Fold the
    # scales into the kernels so the concatenated conv yields
    # a0*conv0(h0) + a1*conv1(h1), then realize the summed shifts b0+b1
    # through a pass-through BN (zero mean, variance 1 - eps).
    def affine(layer):
        a = layer.gamma.data / np.sqrt(layer.bn_state.var + layer.bn_state.eps)
        b = layer.beta.data - a * layer.bn_state.mean
        return a, b

    a0, shift0 = affine(l02)
    a1, shift1 = affine(l12)
    folded = np.concatenate(
        [l02.weight.data * a0[:, None, None, None], l12.weight.data * a1[:, None, None, None]],
        axis=1,
    )
    d = l02.out_ch
    eps = l02.bn_state.eps
    second = _clone_conv_bn(
        folded,
        np.ones(d),
        shift0 + shift1,
        np.zeros(d),
        np.full(d, 1.0 - eps),
        stride=1,
        use_relu=False,
        dtype=dtype,
    )

    wide = Branch.__new__(Branch)
    wide.spec = None
    wide.layers = [first, second]
    return wide


class GroupConvBN:
    """Group convolution over a concatenated state, per-channel BN, and an
    optional trailing ReLU. Group order matches line order."""

    def __init__(self, kernels, gamma, beta, mean, var, stride, use_relu, dtype, eps=1e-5):
        self.kernels = [Tensor(np.ascontiguousarray(k.astype(dtype)), requires_grad=True) for k in kernels]
        self.gamma = Tensor(gamma.astype(dtype), requires_grad=True)
        self.beta = Tensor(beta.astype(dtype), requires_grad=True)
        self.bn_state = BatchNormState(gamma.shape[0], eps=eps, dtype=dtype)
        self.bn_state.mean = mean.astype(dtype)
        self.bn_state.var = var.astype(dtype)
        self.stride = stride
        self.pad = kernels[0].shape[2] // 2
        self.use_relu = use_relu

    def __call__(self, x, training=False):
        y = group_conv2d(x, self.kernels, stride=self.stride, pad=self.pad)
        y = batch_norm(y, self.gamma, self.beta, self.bn_state, training)
        return relu(y) if self.use_relu else y


class LoweredMergeRunBlock:
    """Merge-and-run block lowered onto the concatenated 2d-channel state.

    Accepts the same pair of line inputs as the source block and returns
    the same pair of line outputs; internally the branches run as one
    group convolution stack and the merge-and-run mapping is a single
    dense idempotent matrix applied across channels.
    """

    def __init__(self, layers, skip_matrix, line_channels):
        self.layers = layers
        self.skip_matrix = skip_matrix
        self.line_channels = line_channels

    def __call__(self, xs, training=False, post_relu=True):
        x0, x1 = xs
        state = concat_channels([x0, x1])
        h = state
        for layer in self.layers:
            h = layer(h, training)
        skip = channel_transform(state, self.skip_matrix)
        y = add(h, skip)
        if post_relu:
            y = relu(y)
        d = self.line_channels
        return channel_slice(y, 0, d), channel_slice(y, d, 2 * d)


def lower_merge_and_run(b0: Branch, b1: Branch) -> LoweredMergeRunBlock:
    """Rewrite a two-line merge-and-run block as group convolutions plus a
    dense idempotent skip over the 2d-channel concatenated state."""
    if b0.depth != 2 or b1.depth != 2:
        raise DimensionError(
            f"lowering handles exactly two layers per branch, got {b0.depth}/{b1.depth}"
        )
    for l0, l1 in zip(b0.layers, b1.layers):
        if (l0.in_ch, l0.out_ch, l0.ksize, l0.stride) != (l1.in_ch, l1.out_ch, l1.ksize, l1.stride):
            raise DimensionError("lines must have identical widths and layer shapes")
    if any(layer.stride != 1 for layer in b0.layers) or b0.layers[0].in_ch != b0.layers[1].out_ch:
        raise DimensionError("lowering requires shape-preserving branches")

    dtype = b0.layers[0].weight.data.dtype
    d = b0.layers[0].in_ch
    layers = []
    for i, (l0, l1) in enumerate(zip(b0.layers, b1.layers)):
        layers.append(
            GroupConvBN(
                kernels=[l0.weight.data, l1.weight.data],
                gamma=np.concatenate([l0.gamma.data, l1.gamma.data]),
                beta=np.concatenate([l0.beta.data, l1.beta.data]),
                mean=np.concatenate([l0.bn_state.mean, l1.bn_state.mean]),
                var=np.concatenate([l0.bn_state.var, l1.bn_state.var]),
                stride=l0.stride,
                use_relu=(i == 0),
                dtype=dtype,
                eps=l0.bn_state.eps,
            )
        )
    skip = MergeMapping(2, d).dense(dtype)
    return LoweredMergeRunBlock(layers, skip, d)


def _as_outputs(value):
    if isinstance(value, (tuple, list)):
        return list(value)
    return [value]


def certify(source, target, input_shapes, probes=8, tolerance=1e-10, seed=0, dtype=np.float64):
    """Run both blocks on shared random probes and certify agreement.

    ``input_shapes`` is a list of input tensor shapes; blocks taking
    multiple lines receive them as a list, single-input blocks get the
    tensor directly. Probes are unit normal, deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        tensors = [Tensor(rng.standard_normal(s).astype(dtype)) for s in input_shapes]
        args = tensors[0] if len(tensors) == 1 else tensors
        outs_a = _as_outputs(source(args))
        outs_b = _as_outputs(target(args))
        if len(outs_a) != len(outs_b):
            raise DimensionError("source and target produce different output arity")
        for a, b in zip(outs_a, outs_b):
            if a.shape != b.shape:
                raise DimensionError(f"output shapes differ: {a.shape} vs {b.shape}")
            worst = max(worst, float(np.abs(a.data - b.data).max()))
    return RewriteCertificate(
        source=type(source).__name__,
        target=type(target).__name__,
        probes=probes,
        max_deviation=worst,
        tolerance=tolerance,
        dtype=np.dtype(dtype).name,
    )


def widened_residual_block(b0: Branch, b1: Branch) -> ResidualBlock:
    """Convenience: the widening rewrite packaged as a residual block."""
    return ResidualBlock(widen_parallel_branches(b0, b1))

"""Assemble complete networks from a declarative spec.

Depth accounting: depth parameter L yields L/3 residual blocks per stage
for plain residual nets (2L conv layers overall, depth 2L+2 counting the
stem conv and the FC) and L/6 parallel blocks per stage for the two-line
kinds, so one parallel block replaces two residual blocks and the longest
path through the network keeps the same length (depth L+2).

Stages run at widths (16, 32, 64) by default; every stage after the first
opens with stride-2 downsampling. Wherever a line's width or resolution
changes across a block boundary, that line gets a 1x1 stride-2 projection
(conv + BN, no ReLU): on the skip path for single-line kinds, and feeding
the merge for merge-and-run. Two-line networks start both lines from the
stem output and average them before the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    BlockKind,
    BranchSpec,
    ConvBN,
    IdentityParallelBlock,
    InceptionLikeBlock,
    MergeAndRunBlock,
    ResidualBlock,
)
from .tensor import Tensor, average_n, global_avg_pool, linear
from .train import Param, he_init


class ConfigError(ValueError):
    """Invalid network or run configuration."""


KIND_NAMES = {kind.value: kind for kind in BlockKind}


def parse_kind(name):
    try:
        return KIND_NAMES[name]
    except KeyError:
        raise ConfigError(
            f"unknown network kind {name!r}; expected one of {sorted(KIND_NAMES)}"
        ) from None


@dataclass
class NetworkSpec:
    """Declarative description of a full network."""

    kind: BlockKind
    L: int
    B: int = 2
    stage_widths: tuple = (16, 32, 64)
    width_multiplier: int = 1
    num_classes: int = 10
    in_channels: int = 3
    blocks_per_stage: int = None
    branch_length_override: int = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = parse_kind(self.kind)
        if self.L < 1 or self.B < 1:
            raise ConfigError("L and B must be positive")
        if self.width_multiplier < 1 or self.num_classes < 2:
            raise ConfigError("width_multiplier must be >= 1 and num_classes >= 2")
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage widths must be positive")

    @property
    def widths(self):
        return tuple(w * self.width_multiplier for w in self.stage_widths)

    def resolved_blocks_per_stage(self):
        if self.blocks_per_stage is not None:
            if self.blocks_per_stage < 1:
                raise ConfigError("blocks_per_stage must be positive")
            return self.blocks_per_stage
        if self.L % 6 != 0:
            raise ConfigError(
                f"L={self.L} is not divisible by 6; give blocks_per_stage explicitly"
            )
        return self.L // 3 if self.kind is BlockKind.RESIDUAL else self.L // 6

    def resolved_branch_length(self):
        depth = self.branch_length_override if self.branch_length_override is not None else self.B
        if depth < 1:
            raise ConfigError("branch length must be positive")
        return depth


class LinearLayer:
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = he_init((in_features, out_features), rng, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)

    def parameters(self, prefix):
        return [
            Param(f"{prefix}.weight", self.weight, True),
            Param(f"{prefix}.bias", self.bias, False),
        ]


@dataclass
class Network:
    """A built model: stem conv, stage blocks, classifier head."""

    spec: NetworkSpec
    conv0: ConvBN
    stages: list
    fc: LinearLayer
    dtype: object = np.float32

    @property
    def lines(self):
        return self.spec.kind.lines

    @property
    def blocks(self):
        return [block for stage in self.stages for block in stage]

    def forward(self, x, training=False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        h = self.conv0(x, training)
        if self.lines == 2:
            lines = [h, h]
            for block in self.blocks:
                lines = block(lines, training)
            h = average_n(lines)
        else:
            for block in self.blocks:
                h = block(h, training)
        pooled = global_avg_pool(h)
        return self.fc(pooled)

    def __call__(self, x, training=False):
        return self.forward(x, training)

    def parameters(self):
        out = self.conv0.parameters("conv0")
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                out += block.parameters(f"stage{s + 1}.block{b + 1}")
        out += self.fc.parameters("fc")
        return out

    def _conv_bn_layers(self):
        """Yield (name_prefix, ConvBN) for every conv layer in the model."""
        yield "conv0", self.conv0
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                prefix = f"stage{s + 1}.block{b + 1}"
                branches = getattr(block, "branches", None)
                if branches is None:
                    branches = [block.branch] if hasattr(block, "branch") else [block.b0, block.b1]
                for i, branch in enumerate(branches):
                    for j, layer in enumerate(branch.layers):
                        yield f"{prefix}.branch{i}.layer{j + 1}", layer
                projections = getattr(block, "projections", None)
                if projections is None and getattr(block, "projection", None) is not None:
                    projections = [block.projection]
                for i, proj in enumerate(projections or []):
                    yield f"{prefix}.proj{i}", proj

    def state_arrays(self):
        """Everything a checkpoint needs: parameters plus BN running stats."""
        out = [(p.name, p.tensor.data) for p in self.parameters()]
        for prefix, layer in self._conv_bn_layers():
            out += layer.state_arrays(prefix)
        return out

    def bn_states(self):
        for _, layer in self._conv_bn_layers():
            yield layer.bn_state

    def zero_grad(self):
        for p in self.parameters():
            p.tensor.grad = None

    def load_state(self, arrays):
        """Load a checkpoint dict produced from ``state_arrays``."""
        current = dict(self.state_arrays())
        missing = set(current) - set(arrays)
        extra = set(arrays) - set(current)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        params = {p.name: p.tensor for p in self.parameters()}
        stats = {}
        for prefix, layer in self._conv_bn_layers():
            stats[f"{prefix}.running_mean"] = (layer.bn_state, "mean")
            stats[f"{prefix}.running_var"] = (layer.bn_state, "var")
        for name, arr in arrays.items():
            target = current[name]
            if arr.shape != target.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {target.shape}")
            value = arr.astype(target.dtype, copy=True)
            if name in params:
                params[name].data = value
            else:
                holder, attr = stats[name]
                setattr(holder, attr, value)


def build_network(spec, seed=0, dtype=np.float32):
    """Construct a Network from a NetworkSpec, He-initialized from seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = spec.widths
    per_stage = spec.resolved_blocks_per_stage()
    branch_len = spec.resolved_branch_length()
    kind = spec.kind

    conv0 = ConvBN(spec.in_channels, widths[0], 3, stride=1, relu=True, rng=rng, dtype=dtype)
    stages = []
    prev = widths[0]
    for s, w in enumerate(widths):
        stage = []
        for b in range(per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            cin = prev if b == 0 else w
            needs_proj = stride != 1 or cin != w

            def make_branch():
                return BranchSpec.plain(cin, w, branch_len, stride).instantiate(rng, dtype)

            def make_proj():
                return ConvBN(cin, w, 1, stride=stride, relu=False, rng=rng, dtype=dtype)

            if kind is BlockKind.RESIDUAL:
                block = ResidualBlock(make_branch(), make_proj() if needs_proj else None)
            elif kind is BlockKind.INCEPTION_LIKE:
                block = InceptionLikeBlock(
                    make_branch(), make_branch(), make_proj() if needs_proj else None
                )
            elif kind is BlockKind.MERGE_AND_RUN:
                block = MergeAndRunBlock(
                    [make_branch(), make_branch()],
                    [make_proj(), make_proj()] if needs_proj else None,
                )
            else:
                block = IdentityParallelBlock(
                    [make_branch(), make_branch()],
                    [make_proj(), make_proj()] if needs_proj else None,
                )
            stage.append(block)
            prev = w
        stages.append(stage)

    fc = LinearLayer(widths[-1], spec.num_classes, rng, dtype)
    return Network(spec=spec, conv0=conv0, stages=stages, fc=fc, dtype=dtype)


def count_parameters(model):
    """Exact scalar parameter count: convs, BN gamma/beta, FC weight+bias."""
    return sum(p.tensor.data.size for p in model.parameters())


def longest_path_depth(model):
    """Layer count of the deepest input-to-output path (stem + one branch
    per block + FC); projections do not lengthen paths."""
    per_block = max(
        len(b.layers)
        for block in model.blocks
        for b in (getattr(block, "branches", None) or [getattr(block, "branch", None) or block.b0])
    )
    return 1 + per_block * len(model.blocks) + 1


def build_long_branch_resnet(L, blocks, num_classes=10, seed=0, dtype=np.float32):
    """Residual nets restructured from a plain net of depth 2L+2.

    ``blocks=3``: one block per stage with branch length 2L/3.
    ``blocks=6``: two blocks per stage with branch length L/3.
    Both keep 2L branch conv layers overall; L must be divisible by 3.
    """
    if blocks not in (3, 6):
        raise ConfigError("blocks must be 3 or 6")
    if L % 3 != 0:
        raise ConfigError(f"L={L} is not divisible by 3")
    if blocks == 3:
        per_stage, branch_len = 1, 2 * L // 3
    else:
        per_stage, branch_len = 2, L // 3
    if branch_len < 1:
        raise ConfigError(f"L={L} too small for {blocks} blocks")
    spec = NetworkSpec(
        kind=BlockKind.RESIDUAL,
        L=L,
        num_classes=num_classes,
        blocks_per_stage=per_stage,
        branch_length_override=branch_len,
    )
    return build_network(spec, seed, dtype)

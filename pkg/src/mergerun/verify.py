"""Verification suites behind the ``verify`` CLI subcommand.

Each suite returns rows of (check name, max deviation, tolerance); a check
passes when the deviation is within tolerance. Suites cover idempotence of
the merge matrices, finite-difference gradient checks of every primitive
op plus a full three-block network, the widening and lowering rewrite
certificates, and the unrolled-flow identity for linear branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    BlockKind,
    BranchSpec,
    InceptionLikeBlock,
    MergeAndRunBlock,
    MergeMapping,
    idempotence_check,
    unrolled_flow_check,
)
from .netbuilder import NetworkSpec, build_network
from .tensor import BatchNormState, Tensor
from .transforms import certify, lower_merge_and_run, widened_residual_block


@dataclass
class CheckRow:
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self):
        return self.max_deviation <= self.tolerance


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def random_branch(d, rng, dtype=np.float64, depth=2, in_ch=None):
    """A branch with randomized weights and non-trivial BN statistics, so
    equivalence checks exercise the affine normalization for real."""
    spec = BranchSpec.plain(in_ch if in_ch is not None else d, d, depth)
    branch = spec.instantiate(rng, dtype)
    for layer in branch.layers:
        c = layer.out_ch
        layer.gamma.data = rng.uniform(0.5, 1.5, c).astype(dtype)
        layer.beta.data = (0.3 * rng.standard_normal(c)).astype(dtype)
        layer.bn_state.mean = (0.5 * rng.standard_normal(c)).astype(dtype)
        layer.bn_state.var = rng.uniform(0.5, 2.0, c).astype(dtype)
    return branch


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def fd_check(loss_fn, leaves, rng, probes=6, h=1e-5):
    """Compare analytic gradients of a scalar loss against central finite
    differences at randomly probed coordinates.

    ``loss_fn`` must rebuild the loss from the leaves' current data on
    every call. Returns the worst relative error, with the relative scale
    floored at 1 so near-zero gradients compare absolutely.
    """
    loss = loss_fn()
    for leaf in leaves:
        leaf.grad = None
    loss.backward()
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    worst = 0.0
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        n_probe = min(probes, flat.size)
        coords = rng.choice(flat.size, size=n_probe, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = float(loss_fn().data)
            flat[c] = orig - h
            fm = float(loss_fn().data)
            flat[c] = orig
            fd = (fp - fm) / (2.0 * h)
            a = float(grad.reshape(-1)[c])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            worst = max(worst, rel)
    return worst


def _op_gradcheck_cases(rng):
    """Yield (name, loss_fn, leaves) for every differentiable primitive."""

    def leaf(shape, scale=1.0):
        return Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    def proj(t, shape):
        w = rng.standard_normal(shape)
        return lambda: T.weighted_sum(t(), w)

    a, b = leaf((3, 5)), leaf((3, 5))
    yield "add", proj(lambda: T.add(a, b), (3, 5)), [a, b]

    s = leaf((4, 3))
    yield "scale", proj(lambda: T.scale(s, -1.7), (4, 3)), [s]

    avg_leaves = [leaf((2, 4)) for _ in range(3)]
    yield "average_n", proj(lambda: T.average_n(avg_leaves), (2, 4)), avg_leaves

    r = leaf((6, 6))
    yield "relu", proj(lambda: T.relu(r), (6, 6)), [r]

    t = leaf((3, 4))
    yield "sum", (lambda: T.tensor_sum(t)), [t]

    cx = leaf((2, 3, 6, 6))
    ck = leaf((4, 3, 3, 3), scale=0.5)
    yield "conv2d", proj(lambda: T.conv2d(cx, ck, stride=2, pad=1), (2, 4, 3, 3)), [cx, ck]

    gx = leaf((2, 4, 5, 5))
    gk0, gk1 = leaf((3, 2, 3, 3), scale=0.5), leaf((3, 2, 3, 3), scale=0.5)
    yield (
        "group_conv2d",
        proj(lambda: T.group_conv2d(gx, [gk0, gk1], stride=1, pad=1), (2, 6, 5, 5)),
        [gx, gk0, gk1],
    )

    bx = leaf((3, 4, 5, 5))
    bg = Tensor(rng.uniform(0.5, 1.5, 4), requires_grad=True)
    bb = Tensor(0.3 * rng.standard_normal(4), requires_grad=True)
    bstate = BatchNormState(4, dtype=np.float64)
    bstate.update = False
    yield (
        "batch_norm_train",
        proj(lambda: T.batch_norm(bx, bg, bb, bstate, training=True), (3, 4, 5, 5)),
        [bx, bg, bb],
    )
    estate = BatchNormState(4, dtype=np.float64)
    estate.mean = 0.5 * rng.standard_normal(4)
    estate.var = rng.uniform(0.5, 2.0, 4)
    yield (
        "batch_norm_eval",
        proj(lambda: T.batch_norm(bx, bg, bb, estate, training=False), (3, 4, 5, 5)),
        [bx, bg, bb],
    )

    lx, lw, lb = leaf((4, 6)), leaf((6, 3)), leaf((3,))
    yield "linear", proj(lambda: T.linear(lx, lw, lb), (4, 3)), [lx, lw, lb]

    px = leaf((2, 3, 4, 4))
    yield "global_avg_pool", proj(lambda: T.global_avg_pool(px), (2, 3)), [px]

    c0, c1 = leaf((2, 2, 3, 3)), leaf((2, 3, 3, 3))
    yield (
        "concat_channels",
        proj(lambda: T.concat_channels([c0, c1]), (2, 5, 3, 3)),
        [c0, c1],
    )

    sl = leaf((2, 5, 3, 3))
    yield "channel_slice", proj(lambda: T.channel_slice(sl, 1, 4), (2, 3, 3, 3)), [sl]

    mt = leaf((2, 4, 3, 3))
    mat = rng.standard_normal((4, 4))
    yield "channel_transform", proj(lambda: T.channel_transform(mt, mat), (2, 4, 3, 3)), [mt]

    logits = leaf((4, 10))
    labels = rng.integers(0, 10, 4)
    yield "softmax_cross_entropy", (lambda: T.softmax_cross_entropy(logits, labels)), [logits]


def suite_gradcheck(seed=0, probes=6, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    rows = []
    for name, loss_fn, leaves in _op_gradcheck_cases(rng):
        rows.append(CheckRow(f"grad_{name}", fd_check(loss_fn, leaves, rng, probes), tolerance))
    rows.append(CheckRow("grad_dmrnet_3block", network_gradcheck(seed=seed, probes=probes), tolerance))
    return rows


def network_gradcheck(seed=0, probes=6, h=1e-5):
    """Finite-difference check through a full three-block two-line network."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(kind=BlockKind.MERGE_AND_RUN, L=6, stage_widths=(2, 3, 4), num_classes=3)
    model = build_network(spec, seed=seed, dtype=np.float64)
    for state in model.bn_states():
        state.update = False
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    labels = rng.integers(0, 3, 2)

    def loss_fn():
        return T.softmax_cross_entropy(model.forward(x, training=True), labels)

    leaves = [x] + [p.tensor for p in model.parameters()]
    return fd_check(loss_fn, leaves, rng, probes=probes, h=h)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def suite_idempotence(tolerance=1e-12):
    rows = []
    for k in (2, 3, 4, 8):
        for d in (1, 4, 16):
            mapping = MergeMapping(k, d)
            for n in (2, 3, 10):
                rows.append(
                    CheckRow(f"idempotence_K{k}_d{d}_n{n}", idempotence_check(mapping, n), tolerance)
                )
    return rows


def suite_widen(seed=0, perturb=0.0, d=16, probes=8, tolerance=1e-10):
    rng = np.random.default_rng(seed)
    b0 = random_branch(d, rng)
    b1 = random_branch(d, rng)
    source = InceptionLikeBlock(b0, b1)
    target = widened_residual_block(b0, b1)
    if perturb:
        target.branch.layers[0].weight.data[0, 0, 0, 0] += perturb
    cert = certify(source, target, [(2, d, 8, 8)], probes=probes, tolerance=tolerance, seed=seed + 1)
    return [CheckRow(f"widen_d{d}", cert.max_deviation, cert.tolerance)]


def suite_lower(seed=0, perturb=0.0, d=16, probes=8, tolerance=1e-10):
    rng = np.random.default_rng(seed)
    b0 = random_branch(d, rng)
    b1 = random_branch(d, rng)
    source = MergeAndRunBlock([b0, b1])
    target = lower_merge_and_run(b0, b1)
    if perturb:
        target.layers[0].kernels[0].data[0, 0, 0, 0] += perturb
    cert = certify(
        source, target, [(2, d, 8, 8), (2, d, 8, 8)], probes=probes, tolerance=tolerance, seed=seed + 1
    )
    rows = [CheckRow(f"lower_d{d}", cert.max_deviation, cert.tolerance)]
    rows.append(CheckRow(f"lower_skip_idempotent_d{d}", idempotence_check(target.skip_matrix, 2), 1e-12))
    return rows


def suite_flow(seed=0, d=8, tolerance=1e-9):
    rng = np.random.default_rng(seed)
    rows = []
    for span in range(1, 6):
        x0 = rng.standard_normal(d)
        x1 = rng.standard_normal(d)
        mats = [(rng.standard_normal((d, d)), rng.standard_normal((d, d))) for _ in range(span)]
        rows.append(CheckRow(f"flow_span{span}", unrolled_flow_check(x0, x1, mats), tolerance))
    return rows


SUITES = {
    "idempotence": suite_idempotence,
    "gradcheck": suite_gradcheck,
    "widen": suite_widen,
    "lower": suite_lower,
    "flow": suite_flow,
}


def run_suites(names, perturb=0.0):
    rows = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown verify suite {name!r}; choose from {sorted(SUITES)}")
        suite = SUITES[name]
        if name in ("widen", "lower"):
            rows.extend(suite(perturb=perturb))
        else:
            rows.extend(suite())
    return rows

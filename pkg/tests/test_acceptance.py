"""Acceptance suite: one test per criterion, each printing a PASS/FAIL
line (run with ``pytest tests/test_acceptance.py -v -s``).

Two parameter-count sub-criteria are expected to fail and are left
failing deliberately: the published totals they reference are one-decimal
roundings (the true census at L=12 is 0.370M, 7.6% from "0.4M", and the
merge-and-run/residual gap at L=12 and L=24 exceeds 2% structurally).
The exact counts are locked by tests/test_netbuilder.py.
"""

import os
import time
from fractions import Fraction

import numpy as np
import pytest

from mergerun.blocks import (
    BlockKind,
    InceptionLikeBlock,
    MergeAndRunBlock,
    MergeMapping,
    idempotence_check,
    inception_like_forward,
    merge_and_run_forward,
    unrolled_flow_check,
)
from mergerun.cli import main
from mergerun.data import LabeledImageSet, compute_channel_stats, load_cifar10
from mergerun.netbuilder import NetworkSpec, build_network, count_parameters
from mergerun.paths import average_length, blocks_for, enumerate_paths
from mergerun.tensor import Tensor, softmax_cross_entropy
from mergerun.train import TrainConfig, train_loop
from mergerun.transforms import certify, lower_merge_and_run, widened_residual_block
from mergerun.verify import random_branch

from helpers import dense_merge_matrix, fd_gradient, max_rel_error

R, I, M = BlockKind.RESIDUAL, BlockKind.INCEPTION_LIKE, BlockKind.MERGE_AND_RUN


def report(criterion, ok, detail):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def test_criterion_1_idempotence():
    t0 = time.perf_counter()
    worst = 0.0
    for k in (2, 3, 4, 8):
        for d in (1, 4, 16):
            worst = max(worst, idempotence_check(MergeMapping(k, d), 2))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    assert report("1 idempotence", ok, f"max |M^2 - M| = {worst:.3e}, {elapsed:.3f}s")


def test_criterion_2_matrix_form_equivalence():
    rng = np.random.default_rng(20)
    worst_mr = worst_il = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 6))
        n = int(rng.integers(1, 3))
        hw = int(rng.integers(3, 7))
        b0, b1 = random_branch(d, rng), random_branch(d, rng)
        x0 = Tensor(rng.standard_normal((n, d, hw, hw)))
        x1 = Tensor(rng.standard_normal((n, d, hw, hw)))

        y0, y1 = merge_and_run_forward(x0, x1, b0, b1, post_relu=False)
        stacked_h = np.concatenate([b0(x0).data, b1(x1).data], axis=1)
        stacked_x = np.concatenate([x0.data, x1.data], axis=1)
        dense = stacked_h + np.einsum("ij,njhw->nihw", dense_merge_matrix(2, d), stacked_x)
        got = np.concatenate([y0.data, y1.data], axis=1)
        worst_mr = max(worst_mr, float(np.abs(got - dense).max()))

        y = inception_like_forward(x0, b0, b1, post_relu=False)
        selector = np.concatenate([np.eye(d), np.eye(d)], axis=1)
        shared_input_h = np.concatenate([b0(x0).data, b1(x0).data], axis=1)
        dense_il = np.einsum("ij,njhw->nihw", selector, shared_input_h) + x0.data
        worst_il = max(worst_il, float(np.abs(y.data - dense_il).max()))
    ok = worst_mr <= 1e-12 and worst_il <= 1e-12
    assert report("2 matrix-form", ok, f"merge-and-run {worst_mr:.3e}, inception-like {worst_il:.3e}")


def test_criterion_3_unrolled_flow():
    rng = np.random.default_rng(21)
    d = 8
    worst = 0.0
    for span in range(1, 6):
        mats = [(rng.standard_normal((d, d)), rng.standard_normal((d, d))) for _ in range(span)]
        worst = max(worst, unrolled_flow_check(rng.standard_normal(d), rng.standard_normal(d), mats))
    assert report("3 unrolled-flow", worst <= 1e-9, f"max deviation {worst:.3e} over spans 1..5")


def test_criterion_4_gradient_checks():
    from mergerun.verify import _op_gradcheck_cases

    t0 = time.perf_counter()
    rng = np.random.default_rng(22)
    worst_name, worst = "", 0.0

    for name, loss_fn, leaves in _op_gradcheck_cases(rng):
        loss = loss_fn()
        for leaf in leaves:
            leaf.grad = None
        loss.backward()
        for leaf in leaves:
            coords = rng.choice(leaf.data.size, size=min(6, leaf.data.size), replace=False)
            numeric = fd_gradient(lambda: loss_fn().data, leaf.data, coords)
            rel = max_rel_error(leaf.grad.reshape(-1)[coords], numeric)
            if rel > worst:
                worst_name, worst = name, rel

    # full three-block two-line network, probing parameters and the input
    spec = NetworkSpec(kind=M, L=6, stage_widths=(2, 3, 4), num_classes=3)
    model = build_network(spec, seed=2, dtype=np.float64)
    for state in model.bn_states():
        state.update = False
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    labels = rng.integers(0, 3, 2)

    def loss_fn():
        return softmax_cross_entropy(model.forward(x, training=True), labels)

    loss_fn().backward()
    leaves = [x] + [p.tensor for p in model.parameters()]
    sizes = np.array([leaf.data.size for leaf in leaves])
    bounds = np.cumsum(sizes)
    for pick in rng.choice(bounds[-1], size=100, replace=False):
        li = int(np.searchsorted(bounds, pick, side="right"))
        offset = pick - (bounds[li - 1] if li > 0 else 0)
        leaf = leaves[li]
        numeric = fd_gradient(lambda: loss_fn().data, leaf.data, [offset])
        rel = max_rel_error([leaf.grad.reshape(-1)[offset]], numeric)
        if rel > worst:
            worst_name, worst = "dmrnet_3block", rel

    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120.0
    assert report("4 gradients", ok, f"worst rel err {worst:.3e} ({worst_name}), {elapsed:.1f}s")


def test_criterion_5_path_analysis():
    exact = all(
        enumerate_paths(kind, blocks_for(kind, L), B).mean() == average_length(kind, L, B)
        for kind in (R, I, M)
        for L in (3, 6, 9, 12, 24)
        for B in (1, 2, 3)
    )
    single = (
        enumerate_paths(R, 2, 2, include_endpoints=False).mean() == 2
        and enumerate_paths(I, 1, 2, include_endpoints=False).mean() == Fraction(4, 3)
        and enumerate_paths(M, 1, 2, include_endpoints=False).mean() == Fraction(2, 3)
    )
    ordered = all(
        average_length(M, L, B) < average_length(I, L, B) < average_length(R, L, B)
        for L in (3, 6, 9, 12, 24)
        for B in (1, 2, 3)
    )
    ok = exact and single and ordered
    assert report(
        "5 path-analysis",
        ok,
        f"closed==enumerated {exact}, single-block 2|4/3|2/3 {single}, ordering {ordered}",
    )


def test_criterion_6_rewrite_certificates():
    rng = np.random.default_rng(23)
    d = 16
    b0, b1 = random_branch(d, rng), random_branch(d, rng)
    widen_cert = certify(
        InceptionLikeBlock(b0, b1), widened_residual_block(b0, b1), [(2, d, 8, 8)], probes=8
    )
    lower_cert = certify(
        MergeAndRunBlock([b0, b1]),
        lower_merge_and_run(b0, b1),
        [(2, d, 8, 8), (2, d, 8, 8)],
        probes=8,
    )

    bad = widened_residual_block(b0, b1)
    bad.branch.layers[0].weight.data[0, 0, 0, 0] += 0.1
    neg = certify(InceptionLikeBlock(b0, b1), bad, [(2, d, 8, 8)], probes=8)

    ok = widen_cert.ok and lower_cert.ok and not neg.ok
    assert report(
        "6 rewrites",
        ok,
        f"widen {widen_cert.max_deviation:.3e}, lower {lower_cert.max_deviation:.3e}, "
        f"negative control fails: {not neg.ok}",
    )


def test_criterion_7a_residual_l12_absolute_count():
    """Expected to FAIL: the true census is 369,690 (0.370M); the quoted
    0.4M is a one-decimal rounding, 7.6% away, outside the 5% gate."""
    count = count_parameters(build_network(NetworkSpec(kind=R, L=12)))
    rel = abs(count - 0.4e6) / 0.4e6
    assert report("7a resnet-12 ~0.4M", rel <= 0.05, f"count {count:,} is {rel:.1%} from 0.4M")


def test_criterion_7b_merge_and_run_l54_absolute_count():
    count = count_parameters(build_network(NetworkSpec(kind=M, L=54)))
    rel = abs(count - 1.7e6) / 1.7e6
    assert report("7b dmrnet-54 ~1.7M", rel <= 0.05, f"count {count:,} is {rel:.1%} from 1.7M")


def test_criterion_7c_wide_l30_absolute_count():
    count = count_parameters(build_network(NetworkSpec(kind=M, L=30, width_multiplier=4)))
    rel = abs(count - 14.9e6) / 14.9e6
    assert report("7c wide-30 ~14.9M", rel <= 0.07, f"count {count:,} is {rel:.1%} from 14.9M")


def test_criterion_7d_parameter_parity():
    """Expected to FAIL at L=12 and L=24: one merge-and-run block carries
    two transition convs plus two projections where two residual blocks
    carry one and one, a constant 20,288-parameter gap that only drops
    under 2% around L=33."""
    gaps = {}
    for L in (12, 24, 54):
        r = count_parameters(build_network(NetworkSpec(kind=R, L=L)))
        m = count_parameters(build_network(NetworkSpec(kind=M, L=L)))
        gaps[L] = abs(m - r) / r
    detail = ", ".join(f"L={L}: {g:.2%}" for L, g in gaps.items())
    assert report("7d parity <=2%", all(g <= 0.02 for g in gaps.values()), detail)


def test_criterion_8a_synthetic_training_via_cli(tmp_path):
    t0 = time.perf_counter()
    out = str(tmp_path / "run")
    rc = main(
        [
            "train",
            "--set", "kind=dmrnet",
            "--set", "L=6",
            "--set", "widths=4,8,16",
            "--set", "data=synthetic:2:200",
            "--set", "epochs=10",
            "--set", f"out_dir={out}",
        ]
    )
    elapsed = time.perf_counter() - t0
    with open(os.path.join(out, "metrics.csv")) as f:
        rows = [line.strip().split(",") for line in f][1:]
    final_err = float(rows[-1][3])
    ok = rc == 0 and final_err == 0.0 and elapsed < 120.0
    assert report("8a synthetic-train", ok, f"final train_err {final_err}%, {elapsed:.1f}s")


def _cifar_dir():
    candidates = [os.environ.get("MERGERUN_CIFAR10", "")]
    candidates.append(os.path.join(os.path.dirname(__file__), "..", "data", "cifar-10-batches-bin"))
    for c in candidates:
        if c and os.path.exists(os.path.join(c, "data_batch_1.bin")):
            return c
    return None


@pytest.mark.skipif(
    _cifar_dir() is None,
    reason="CIFAR-10 binary batches not present (set MERGERUN_CIFAR10 or place them "
    "under data/cifar-10-batches-bin); unobtainable in this offline environment",
)
def test_criterion_8b_cifar_subset_training():
    t0 = time.perf_counter()
    train_full, test_full = load_cifar10(_cifar_dir())
    assert len(train_full) == 50000 and len(test_full) == 10000
    sub_images = train_full.images[:5000]
    means, stds = compute_channel_stats(sub_images)
    train = LabeledImageSet(sub_images, train_full.labels[:5000], means, stds)
    test = LabeledImageSet(test_full.images[:1000], test_full.labels[:1000], means, stds)

    spec = NetworkSpec(kind=M, L=12, stage_widths=(8, 16, 32), num_classes=10)
    model = build_network(spec, seed=0)
    cfg = TrainConfig(epochs=20, batch_size=64, seed=0, augment=True)
    metrics = train_loop(model, train, test, cfg)
    elapsed = time.perf_counter() - t0
    last = metrics.rows[-1]
    ok = last.train_loss < 1.2 and last.test_err < 50.0 and elapsed < 1800.0
    assert report(
        "8b cifar-subset",
        ok,
        f"train_loss {last.train_loss:.3f}, test_err {last.test_err:.1f}%, {elapsed:.0f}s",
    )


def test_criterion_9_determinism(tmp_path):
    from mergerun.data import synthetic_set

    full = synthetic_set(2, 120, seed=13)
    means, stds = compute_channel_stats(full.images[:96])
    train = LabeledImageSet(full.images[:96], full.labels[:96], means, stds)
    test = LabeledImageSet(full.images[96:], full.labels[96:], means, stds)
    cfg = TrainConfig(epochs=3, batch_size=32, seed=17, augment=True)

    blobs = []
    for run in ("a", "b"):
        spec = NetworkSpec(kind=M, L=6, stage_widths=(2, 3, 4), num_classes=2)
        model = build_network(spec, seed=cfg.seed)
        out_dir = tmp_path / run
        train_loop(model, train, test, cfg, out_dir=str(out_dir), timer=lambda: 0.0)
        blobs.append(
            (
                (out_dir / "metrics.csv").read_bytes(),
                (out_dir / "checkpoint.mrn").read_bytes(),
            )
        )
    ok = blobs[0][0] == blobs[1][0] and blobs[0][1] == blobs[1][1]
    assert report("9 determinism", ok, "metrics.csv and checkpoint bit-identical across reruns")

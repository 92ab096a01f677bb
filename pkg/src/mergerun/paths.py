"""Exact path-length census of the unrolled networks.

A path runs from input to output choosing, per block, either a residual
branch (contributing that branch's conv layers to the length) or a skip
edge (contributing nothing; projections are not counted). Per block the
continuations are:

* residual: branch (length B) or identity skip, 2 ways;
* inception-like: either branch (B each) or the skip, 3 ways;
* merge-and-run, from line i: branch i (length B, stays on line i) or the
  merge edge (length 0) onto either line, 3 ways. The input fans out to
  both lines and the closing merge joins them, so a net with L blocks has
  2 * 3^L paths.

Distributions are computed by multiplying exact integer generating
polynomials (one per line), so large L stays cheap and means are exact
rationals. The stem conv and the FC layer add 2 to every length when
``include_endpoints`` is set.

For the average length formulas the conventional depth parameter L counts
2L blocks for a residual net and L blocks for the parallel kinds, giving
averages BL+2, (2B/3)L+2 and (B/3)L+2; every enumerated mean must match
the formula exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .blocks import BlockKind


def _poly_mul(p, q):
    """Multiply dense integer polynomials given as coefficient lists."""
    out = [0] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        if a == 0:
            continue
        for j, b in enumerate(q):
            out[i + j] += a * b
    return out


def _poly_add(p, q):
    if len(p) < len(q):
        p, q = q, p
    out = list(p)
    for i, b in enumerate(q):
        out[i] += b
    return out


@dataclass
class PathLengthDistribution:
    """Exact multiset of path lengths: length -> multiplicity."""

    entries: dict
    kind: BlockKind
    num_blocks: int
    B: int
    include_endpoints: bool

    @property
    def total_paths(self):
        return sum(self.entries.values())

    def mean(self):
        total = self.total_paths
        return Fraction(sum(length * m for length, m in self.entries.items()), total)

    def variance(self):
        mu = self.mean()
        total = self.total_paths
        second = Fraction(sum(length * length * m for length, m in self.entries.items()), total)
        return second - mu * mu

    def std(self):
        return math.sqrt(self.variance())


def enumerate_paths(kind, num_blocks, B, include_endpoints=True):
    """Exact path-length distribution of a network of ``num_blocks`` blocks
    whose branches have B conv layers each."""
    if num_blocks < 0:
        raise ValueError("num_blocks must be non-negative")
    if B < 0:
        raise ValueError("B must be non-negative")
    branch = [0] * B + [1]  # x^B

    if kind is BlockKind.RESIDUAL:
        step = _poly_add(branch, [1])  # x^B + 1
        poly = [1]
        for _ in range(num_blocks):
            poly = _poly_mul(poly, step)
    elif kind is BlockKind.INCEPTION_LIKE:
        step = _poly_add([a * 2 for a in branch], [1])  # 2 x^B + 1
        poly = [1]
        for _ in range(num_blocks):
            poly = _poly_mul(poly, step)
    elif kind is BlockKind.MERGE_AND_RUN:
        # One polynomial per line; a block sends line j to
        # line_j * x^B (branch) plus line_0 + line_1 (merge edges in).
        p0, p1 = [1], [1]
        for _ in range(num_blocks):
            both = _poly_add(p0, p1)
            p0 = _poly_add(_poly_mul(p0, branch), both)
            p1 = _poly_add(_poly_mul(p1, branch), both)
        poly = _poly_add(p0, p1)
    else:
        raise ValueError(f"unsupported kind for path enumeration: {kind}")

    shift = 2 if include_endpoints else 0
    entries = {i + shift: c for i, c in enumerate(poly) if c != 0}
    return PathLengthDistribution(entries, kind, num_blocks, B, include_endpoints)


def blocks_for(kind, L):
    """Block count for depth parameter L under the average-length
    convention: a residual net has 2L blocks, the parallel kinds have L."""
    return 2 * L if kind is BlockKind.RESIDUAL else L


def average_length(kind, L, B):
    """Closed-form average path length, endpoints included, as an exact
    rational: BL+2 (residual), (2B/3)L+2 (inception-like), (B/3)L+2
    (merge-and-run)."""
    if kind is BlockKind.RESIDUAL:
        return Fraction(B * L + 2)
    if kind is BlockKind.INCEPTION_LIKE:
        return Fraction(2 * B, 3) * L + 2
    if kind is BlockKind.MERGE_AND_RUN:
        return Fraction(B, 3) * L + 2
    raise ValueError(f"unsupported kind for average length: {kind}")


def distribution_report(dist):
    """CSV rows (length, multiplicity, probability) plus a trailing
    ``# mean=..., std=...`` comment; probabilities sum to 1."""
    total = dist.total_paths
    lines = ["length,multiplicity,probability"]
    for length in sorted(dist.entries):
        mult = dist.entries[length]
        lines.append(f"{length},{mult},{mult / total!r}")
    lines.append(f"# mean={dist.mean()}, std={dist.std()!r}")
    return "\n".join(lines) + "\n"

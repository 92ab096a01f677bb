"""Path-length census: enumeration against closed forms, exact rational
means, counts, and the report format."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mergerun.blocks import BlockKind
from mergerun.paths import (
    average_length,
    blocks_for,
    distribution_report,
    enumerate_paths,
)

R, I, M = BlockKind.RESIDUAL, BlockKind.INCEPTION_LIKE, BlockKind.MERGE_AND_RUN


class TestSingleBlockAverages:
    """Block-only average lengths of the three units: 2, 4/3, 2/3."""

    def test_two_residual_blocks(self):
        dist = enumerate_paths(R, 2, 2, include_endpoints=False)
        assert dist.mean() == 2

    def test_one_inception_like_block(self):
        assert enumerate_paths(I, 1, 2, include_endpoints=False).mean() == Fraction(4, 3)

    def test_one_merge_and_run_block(self):
        assert enumerate_paths(M, 1, 2, include_endpoints=False).mean() == Fraction(2, 3)


class TestMergeAndRunDistribution:
    @pytest.mark.parametrize("L", [1, 2, 5, 9])
    def test_closed_form_multiplicities(self, L):
        """Support {2k} with multiplicity 2 C(L,k) 2^(L-k), mean 2L/3."""
        dist = enumerate_paths(M, L, 2, include_endpoints=False)
        expected = {2 * k: 2 * math.comb(L, k) * 2 ** (L - k) for k in range(L + 1)}
        assert dist.entries == expected
        assert dist.mean() == Fraction(2 * L, 3)

    @pytest.mark.parametrize("L", [3, 6, 9])
    def test_path_counts(self, L):
        assert enumerate_paths(R, 2 * L, 2).total_paths == 2 ** (2 * L)
        assert enumerate_paths(I, L, 2).total_paths == 3**L
        assert enumerate_paths(M, L, 2).total_paths == 2 * 3**L


class TestAverageLength:
    def test_frozen_values_at_l9_b2(self):
        assert average_length(R, 9, 2) == 20
        assert average_length(I, 9, 2) == 14
        assert average_length(M, 9, 2) == 8

    def test_degenerate_zero_depth_branches(self):
        for kind in (R, I, M):
            assert average_length(kind, 7, 0) == 2
            assert enumerate_paths(kind, blocks_for(kind, 7), 0).mean() == 2

    @pytest.mark.parametrize("kind", [R, I, M])
    @pytest.mark.parametrize("L", [3, 6, 9, 12, 24])
    @pytest.mark.parametrize("B", [1, 2, 3])
    def test_closed_form_equals_enumeration_exactly(self, kind, L, B):
        dist = enumerate_paths(kind, blocks_for(kind, L), B)
        assert dist.mean() == average_length(kind, L, B)

    @settings(max_examples=30, deadline=None)
    @given(L=st.integers(min_value=1, max_value=40), B=st.integers(min_value=1, max_value=4))
    def test_monotonicity(self, L, B):
        dmr = average_length(M, L, B)
        dil = average_length(I, L, B)
        res = average_length(R, L, B)
        assert dmr < dil < res

    def test_unsupported_kind(self):
        with pytest.raises(ValueError):
            average_length(BlockKind.IDENTITY_PARALLEL, 3, 2)
        with pytest.raises(ValueError):
            enumerate_paths(BlockKind.IDENTITY_PARALLEL, 3, 2)


class TestStd:
    def test_single_path_network(self):
        dist = enumerate_paths(R, 0, 2)
        assert dist.total_paths == 1
        assert dist.std() == 0.0

    @pytest.mark.parametrize("L,B", [(3, 2), (6, 1), (9, 3)])
    def test_residual_binomial_std(self, L, B):
        """A residual net of 2L blocks has binomial path lengths, so the
        std is B sqrt(2L)/2."""
        dist = enumerate_paths(R, 2 * L, B)
        assert dist.variance() == Fraction(B * B * 2 * L, 4)
        np.testing.assert_allclose(dist.std(), B * math.sqrt(2 * L) / 2, rtol=1e-12)


class TestReport:
    def test_probabilities_sum_to_one(self):
        dist = enumerate_paths(M, 24, 2)
        report = distribution_report(dist)
        lines = report.strip().split("\n")
        assert lines[0] == "length,multiplicity,probability"
        assert lines[-1].startswith("# mean=")
        probs = [float(line.split(",")[2]) for line in lines[1:-1]]
        assert abs(sum(probs) - 1.0) <= 1e-12

    def test_exact_mean_in_trailer(self):
        report = distribution_report(enumerate_paths(M, 9, 2))
        assert "# mean=8," in report

    def test_short_path_mass_shifts_toward_merge_and_run(self):
        """Merge-and-run nets concentrate probability on the shortest
        lengths relative to the other kinds, at both small and large L."""
        for L in (9, 24):
            mass = {}
            for kind in (R, I, M):
                dist = enumerate_paths(kind, blocks_for(kind, L), 2)
                total = dist.total_paths
                cutoff = 2 + L  # endpoints plus half the typical budget
                mass[kind] = sum(m for length, m in dist.entries.items() if length <= cutoff) / total
            assert mass[M] > mass[I] > mass[R]
            assert enumerate_paths(M, L, 2).mean() < enumerate_paths(I, L, 2).mean()


class TestLargeL:
    def test_l96_is_cheap(self):
        dist = enumerate_paths(M, 96, 2)
        assert dist.total_paths == 2 * 3**96
        assert dist.mean() == average_length(M, 96, 2)

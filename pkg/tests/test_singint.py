import numpy as np
import pytest

from app.core.exceptions import InsufficientDepth, InvalidNesting, TruncationBelowResolution
from app.services.measure_service import atom, measure_at_depth
from app.services.singint_service import (
    TruncationGrid,
    compop_check,
    depth_ladder,
    full_transform,
    maximal_transform,
    scale_invariance_residual,
    semmes_gap,
    truncated_transform,
    unb_condition,
)


class TestTruncationGrid:
    def test_radii_must_decrease(self):
        with pytest.raises(ValueError):
            TruncationGrid([0.1, 0.2])
        with pytest.raises(ValueError):
            TruncationGrid([0.5, 0.0])

    def test_log_spacing(self):
        grid = TruncationGrid.log_spaced(0.01, 1.0, 3)
        np.testing.assert_allclose(grid.values, [1.0, 0.1, 0.01])
        assert grid.floor == pytest.approx(0.01)

    def test_floor_follows_node_diameter(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        grid = TruncationGrid.for_measure(mu, 2.0, 5)
        assert grid.floor == pytest.approx(2.0 * mu.max_diameter)
        grid.check(mu)
        with pytest.raises(TruncationBelowResolution):
            TruncationGrid([1.0, mu.max_diameter]).check(mu)


class TestTransforms:
    def test_single_atom(self, heisenberg, heisenberg_kernel, gauge_backend):
        q = np.array([0.2, -0.1, 0.05])
        p = np.array([1.0, 0.4, -0.3])
        mu = atom(q, 3.0, gauge_backend)
        expected = heisenberg_kernel.kernel(heisenberg.multiply(heisenberg.inverse(q), p))
        d = float(gauge_backend.distance(q, p))
        np.testing.assert_allclose(truncated_transform(heisenberg_kernel, mu, p, 0.5 * d), expected)
        np.testing.assert_allclose(truncated_transform(heisenberg_kernel, mu, p, 2.0 * d), 0.0)
        np.testing.assert_allclose(full_transform(heisenberg_kernel, mu, p), expected)

    def test_truncation_below_resolution(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        with pytest.raises(TruncationBelowResolution) as info:
            truncated_transform(toy_system.kernel, mu, np.array([1.0, 0.0, 0.0]), mu.max_diameter)
        assert info.value.exit_code == 2

    def test_far_probe_sees_everything(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        p = np.array([3.0, 0.0, 0.0])
        grid = TruncationGrid.log_spaced(2.0 * mu.max_diameter, 1.0, 4)
        whole = np.linalg.norm(full_transform(toy_system.kernel, mu, p))
        assert maximal_transform(toy_system.kernel, mu, p, grid) == pytest.approx(whole, rel=1e-12)


class TestNonVanishing:
    def test_sign_is_certified_on_the_toy_system(self, toy_system):
        res = unb_condition(toy_system.kernel, toy_system, 1, (0,), depth=6, theta=0.0)
        assert res.value > 0
        assert res.error_bar < res.value
        assert res.certified_sign == 1
        assert res.nodes > 0

    def test_depth_must_exceed_the_word(self, toy_system):
        with pytest.raises(InsufficientDepth) as info:
            unb_condition(toy_system.kernel, toy_system, 1, (0,), depth=1)
        assert info.value.exit_code == 2

    def test_ladder_differences(self, toy_system):
        rows = depth_ladder(toy_system.kernel, toy_system, 1, (0,), [3, 4, 5])
        assert [r.depth for r in rows] == [3, 4, 5]
        assert rows[0].difference is None
        assert rows[1].difference == pytest.approx(rows[1].value - rows[0].value)
        assert all(r.error_bar >= 0 for r in rows)

    def test_ladder_differences_contract(self, toy_system):
        rows = depth_ladder(toy_system.kernel, toy_system, 1, (0,), [3, 4, 5, 6], theta=0.0)
        bound = max(toy_system.params.r, toy_system.params.r0) + 0.1
        ratios = [r.ratio for r in rows[2:]]
        assert all(x is not None and x <= bound for x in ratios)

    def test_s0_scale_invariance(self, toy_system):
        assert scale_invariance_residual(toy_system.kernel, toy_system, 3) < 1e-10

    def test_scale_invariance_needs_two_levels(self, toy_system):
        with pytest.raises(InsufficientDepth):
            scale_invariance_residual(toy_system.kernel, toy_system, 1)


class TestEmpiricalConstants:
    def test_maximal_transform_agrees_across_depths(self, toy_system):
        grid = TruncationGrid.log_spaced(0.2, 2.0, 4)
        probes = np.array([[1.0, 0.0, 0.0], [-1.0, 1.5, 0.0], [-1.5, 0.0, 1.0]])
        coarse, fine = measure_at_depth(toy_system, 5), measure_at_depth(toy_system, 6)
        for p in probes:
            a = maximal_transform(toy_system.kernel, coarse, p, grid)
            b = maximal_transform(toy_system.kernel, fine, p, grid)
            assert b == pytest.approx(a, rel=0.25)

    def test_single_far_atom_has_no_gap(self, heisenberg_kernel, gauge_backend):
        mu = atom(np.array([-1.0, 0.0, 0.0]), 3.0, gauge_backend)
        grid = TruncationGrid.log_spaced(0.01, 1.0, 8)
        report = semmes_gap(heisenberg_kernel, mu, far_samples=4, near_samples=4, grid=grid, seed=2)
        assert report.gap == pytest.approx(0.0, abs=1e-12)
        assert report.upper_density is None
        assert len(report.rows) == 8

    def test_semmes_on_the_toy_measure(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        grid = TruncationGrid.for_measure(mu, 2.0, 4)
        report = semmes_gap(toy_system.kernel, mu, far_samples=3, near_samples=3, grid=grid, seed=2)
        assert report.t_star_max >= 0
        assert report.upper_density is not None

    def test_equal_words_leave_nothing(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        report = compop_check(toy_system.kernel, toy_system, mu, (1,), (1,), 1, probes=4, seed=1)
        assert report.left_max == 0.0
        assert report.a_k <= 0.0
        assert len(report.rows) == 4

    def test_nested_words(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        report = compop_check(toy_system.kernel, toy_system, mu, (1,), (1, 2), 1, probes=4, seed=1)
        assert report.left_max > 0.0
        assert report.outer_word == [1]
        assert report.inner_word == [1, 2]

    def test_inner_must_extend_outer(self, toy_system):
        mu = measure_at_depth(toy_system, 3)
        with pytest.raises(InvalidNesting):
            compop_check(toy_system.kernel, toy_system, mu, (1,), (2,), 1, probes=2)

    def test_measure_must_resolve_the_inner_cylinder(self, toy_system):
        mu = measure_at_depth(toy_system, 2)
        with pytest.raises(InvalidNesting):
            compop_check(toy_system.kernel, toy_system, mu, (1,), (1, 2), 1, probes=2)

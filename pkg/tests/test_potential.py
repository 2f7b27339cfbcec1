import numpy as np
import pytest

from app.core.exceptions import DegenerateConfiguration, NotHType, OriginSingularity
from app.models.schemas import GroupPreset
from app.services.algebra_service import algebra_from_preset, validate_algebra
from app.services.group_service import CarnotGroup
from app.services.measure_service import atom, measure_at_depth
from app.services.potential_service import (
    HTypeKernel,
    gamma_lipschitz_ratio,
    gamma_lipschitz_scan,
    horizontal_derivative,
    kernel_size_constant,
    kernel_smoothness_constant,
    potential_harmonicity_residual,
    potential_lipschitz_ratio,
    riesz_potential,
    sublaplacian_residual,
)


def _away_from_origin(kernel, pts, floor=0.3):
    return pts[kernel.gauge_norm(pts) > floor]


class TestHType:
    def test_step_three_is_rejected(self, engel):
        with pytest.raises(NotHType):
            HTypeKernel(engel)

    def test_degenerate_bracket_is_rejected(self):
        group = CarnotGroup(validate_algebra((3, 1), [(1, 2, 4, 1, 1)]))
        with pytest.raises(NotHType):
            HTypeKernel(group)

    def test_quaternionic_center_is_accepted(self):
        group = CarnotGroup(algebra_from_preset(GroupPreset.H_TYPE, center_dim=3))
        ker = HTypeKernel(group)
        assert ker.J.shape == (3, 4, 4)

    def test_origin_is_singular(self, heisenberg_kernel):
        with pytest.raises(OriginSingularity):
            heisenberg_kernel.gamma(np.zeros(3))
        with pytest.raises(OriginSingularity):
            heisenberg_kernel.kernel(np.zeros((2, 3)))


class TestHomogeneity:
    @pytest.mark.parametrize("t", [0.25, 2.0])
    def test_gamma_kernel_and_omega(self, heisenberg, heisenberg_kernel, rng, t):
        ker = heisenberg_kernel
        p = _away_from_origin(ker, rng.uniform(-1, 1, (200, 3)))
        q = heisenberg.dilate(t, p)
        np.testing.assert_allclose(ker.gamma(q), t ** (2 - 4) * ker.gamma(p), rtol=1e-10)
        np.testing.assert_allclose(ker.kernel(q), t ** (1 - 4) * ker.kernel(p), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(ker.omega(q), ker.omega(p), rtol=1e-10, atol=1e-12)

    def test_gamma_is_positive_and_even(self, heisenberg, heisenberg_kernel, rng):
        p = _away_from_origin(heisenberg_kernel, rng.uniform(-1, 1, (200, 3)))
        values = heisenberg_kernel.gamma(p)
        assert np.all(values > 0)
        np.testing.assert_allclose(heisenberg_kernel.gamma(heisenberg.inverse(p)), values, rtol=1e-12)

    def test_omega_points_back_toward_the_origin(self, heisenberg, heisenberg_kernel):
        for i in range(heisenberg.m):
            e = np.zeros(heisenberg.m)
            e[i] = -1.0
            assert heisenberg_kernel.omega(heisenberg.exp_horizontal(e))[i] > 0


class TestHarmonicity:
    @pytest.mark.parametrize("preset", [GroupPreset.HEISENBERG_1, GroupPreset.HEISENBERG_2])
    def test_residual_decays_with_order_two(self, preset, rng):
        group = CarnotGroup(algebra_from_preset(preset))
        ker = HTypeKernel(group)
        p = _away_from_origin(ker, rng.uniform(-1, 1, (100, group.N)), floor=0.5)
        coarse = np.linalg.norm(sublaplacian_residual(ker, p, 1e-2))
        fine = np.linalg.norm(sublaplacian_residual(ker, p, 5e-3))
        assert np.log2(coarse / fine) == pytest.approx(2.0, abs=0.2)

    def test_kernel_matches_finite_differences(self, heisenberg, heisenberg_kernel, rng):
        ker = heisenberg_kernel
        p = _away_from_origin(ker, rng.uniform(-1, 1, (100, 3)), floor=0.5)
        k = ker.kernel(p)
        for i in range(heisenberg.m):
            fd = horizontal_derivative(heisenberg, ker.gamma, p, i, 1e-5)
            np.testing.assert_allclose(k[:, i], fd, rtol=1e-6, atol=1e-8)


class TestLipschitz:
    def test_equal_points_give_zero(self, heisenberg_kernel, gauge_backend):
        p = np.array([0.2, 0.1, 0.0])
        q = np.array([1.0, -1.0, 0.5])
        assert gamma_lipschitz_ratio(heisenberg_kernel, gauge_backend, p, p, q) == 0.0

    def test_query_on_an_input_point_is_degenerate(self, heisenberg_kernel, gauge_backend):
        p1 = np.array([0.2, 0.1, 0.0])
        p2 = np.array([0.4, 0.1, 0.0])
        with pytest.raises(DegenerateConfiguration):
            gamma_lipschitz_ratio(heisenberg_kernel, gauge_backend, p1, p2, p1)

    def test_scan_is_bounded(self, heisenberg_kernel, gauge_backend):
        ratio = gamma_lipschitz_scan(heisenberg_kernel, gauge_backend, 5000, seed=4)
        assert 0 < ratio < np.inf


class TestPotential:
    def test_single_atom_potential_is_gamma(self, heisenberg, heisenberg_kernel, gauge_backend):
        q = np.array([0.3, -0.2, 0.1])
        p = np.array([[1.0, 0.5, -0.2], [-0.4, 0.9, 0.3]])
        mu = atom(q, 3.0, gauge_backend, weight=2.0)
        expected = 2.0 * heisenberg_kernel.gamma(heisenberg.multiply(heisenberg.inverse(q), p))
        np.testing.assert_allclose(riesz_potential(heisenberg_kernel, mu, p), expected, rtol=1e-14)

    def test_potential_is_harmonic_off_the_support(self, heisenberg_kernel, gauge_backend):
        mu = atom(np.zeros(3), 3.0, gauge_backend)
        residual = potential_harmonicity_residual(heisenberg_kernel, mu, np.array([0.8, -0.3, 0.2]), 1e-3)
        assert abs(residual) < 1e-3

    def test_potential_is_lipschitz_away_from_the_support(self, heisenberg_kernel, gauge_backend):
        mu = atom(np.zeros(3), 3.0, gauge_backend)
        ratio = potential_lipschitz_ratio(heisenberg_kernel, gauge_backend, mu, samples=200, clearance=0.5, seed=6)
        assert 0 < ratio < np.inf

    def test_potential_settles_as_the_tree_deepens(self, toy_system):
        p = np.array([3.0, 0.0, 0.0])
        values = [float(riesz_potential(toy_system.kernel, measure_at_depth(toy_system, n), p)) for n in range(3, 7)]
        steps = np.abs(np.diff(values))
        assert np.all(steps[1:] < 0.8 * steps[:-1])


def test_kernel_constants_are_finite(heisenberg_kernel):
    size = kernel_size_constant(heisenberg_kernel, samples=2000, seed=5)
    smooth = kernel_smoothness_constant(heisenberg_kernel, samples=2000, seed=5, safety=1.0)
    assert 0 < size < np.inf
    assert 0 < smooth < np.inf

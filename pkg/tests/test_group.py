import numpy as np
import pytest

from app.core.exceptions import ConfigError, NonPositiveScale, QBelowThree
from app.models.schemas import GroupPreset, MetricKind
from app.services.algebra_service import algebra_from_preset
from app.services.group_service import (
    CarnotGroup,
    MetricBackend,
    certify_quasi_triangle,
    estimate_c0,
    estimate_c1,
    greedy_packing,
    norm_equivalence,
    quasi_triangle_triples,
    unit_sphere_points,
)
from app.services.ifs_service import Ball, VerticalCoset


def test_q_below_three_is_rejected():
    with pytest.raises(QBelowThree, match="Q >= 3 required"):
        CarnotGroup(algebra_from_preset(GroupPreset.ABELIAN_2))


def test_homogeneous_dimensions(heisenberg, engel, abelian3):
    assert (heisenberg.Q, heisenberg.m, heisenberg.step) == (4, 2, 2)
    assert (engel.Q, engel.m, engel.step) == (7, 2, 3)
    assert abelian3.Q == 3


@pytest.mark.parametrize("t", [0.1, 0.5, 3.0])
@pytest.mark.parametrize("backend_name", ["box_backend", "gauge_backend"])
def test_norms_are_homogeneous(request, heisenberg, rng, backend_name, t):
    backend = request.getfixturevalue(backend_name)
    p = rng.uniform(-1, 1, (200, 3))
    np.testing.assert_allclose(backend.norm(heisenberg.dilate(t, p)), t * backend.norm(p), rtol=1e-12)


def test_dilation_is_an_automorphism(engel, rng):
    p = rng.uniform(-1, 1, (100, 4))
    q = rng.uniform(-1, 1, (100, 4))
    lhs = engel.dilate(0.7, engel.multiply(p, q))
    rhs = engel.multiply(engel.dilate(0.7, p), engel.dilate(0.7, q))
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_non_positive_dilation(heisenberg, t):
    with pytest.raises(NonPositiveScale):
        heisenberg.dilate(t, np.ones(3))


def test_distance_is_left_invariant(gauge_backend, heisenberg, rng):
    g = rng.uniform(-2, 2, (100, 3))
    p = rng.uniform(-1, 1, (100, 3))
    q = rng.uniform(-1, 1, (100, 3))
    moved = gauge_backend.distance(heisenberg.multiply(g, p), heisenberg.multiply(g, q))
    np.testing.assert_allclose(moved, gauge_backend.distance(p, q), rtol=1e-9)


def test_gauge_backend_needs_kernel(heisenberg):
    with pytest.raises(ConfigError):
        MetricBackend(heisenberg, MetricKind.GAUGE)


def test_unit_sphere_points(gauge_backend):
    pts = unit_sphere_points(gauge_backend, 500, seed=3)
    np.testing.assert_allclose(gauge_backend.norm(pts), 1.0, rtol=1e-12)


def test_layer_steps(gauge_backend, box_backend):
    assert gauge_backend.layer_step(0.4, 2) == pytest.approx(0.04)
    assert box_backend.layer_step(0.4, 2) == pytest.approx(0.16)
    assert box_backend.layer_step(0.4, 1) == pytest.approx(0.4)


def test_c0_of_euclidean_space(euclidean_backend):
    c0 = estimate_c0(euclidean_backend, sphere_samples=256, r_samples=5, seed=1, safety=1.0)
    assert c0 == pytest.approx(1.0, abs=1e-12)


def test_c0_carries_safety_factor(gauge_backend):
    raw = estimate_c0(gauge_backend, sphere_samples=256, r_samples=9, seed=1, safety=1.0)
    padded = estimate_c0(gauge_backend, sphere_samples=256, r_samples=9, seed=1, safety=1.25)
    assert raw >= 1.0
    assert padded == pytest.approx(1.25 * raw)


def test_greedy_packing_on_a_line(euclidean_backend):
    pts = np.zeros((11, 3))
    pts[:, 0] = np.linspace(0.0, 1.0, 11)
    chosen = greedy_packing(euclidean_backend, pts, 0.25)
    np.testing.assert_array_equal(chosen, [0, 3, 6, 9])


def test_greedy_packing_is_separated_and_maximal(gauge_backend, heisenberg, rng):
    pts = rng.uniform(-1, 1, (400, 3))
    chosen = greedy_packing(gauge_backend, pts, 0.5)
    sub = pts[chosen]
    for n, p in enumerate(sub):
        others = np.delete(sub, n, axis=0)
        assert np.min(gauge_backend.distance(p, others)) >= 0.5
    for p in pts:
        assert np.min(gauge_backend.distance(p, sub)) < 0.5


def test_koranyi_gauge_satisfies_triangle_inequality(heisenberg, heisenberg_kernel):
    backend = MetricBackend(heisenberg, MetricKind.GAUGE, kernel=heisenberg_kernel)
    c = certify_quasi_triangle(backend, samples=5000, seed=11)
    assert c == pytest.approx(1.0, abs=1e-9)
    assert backend.quasi_triangle_constant == c


def test_box_quasi_triangle_constant(heisenberg):
    backend = MetricBackend(heisenberg, MetricKind.BOX)
    c = certify_quasi_triangle(backend, samples=5000, seed=11)
    assert 1.0 <= c < 3.0


def test_norm_equivalence(heisenberg, heisenberg_kernel):
    lo, hi, c = norm_equivalence(heisenberg, heisenberg_kernel, samples=5000, seed=2)
    assert 0 < lo <= hi
    assert c >= 1.0
    assert lo >= 0.5 - 1e-12


def test_triangle_triples_cover_dilates_and_the_vertical_axis(heisenberg):
    p, q, r = quasi_triangle_triples(heisenberg, 100, seed=4)
    assert p.shape == q.shape == r.shape == (600, 3)
    np.testing.assert_allclose(p[100:200], heisenberg.scale(1e-3, p[:100]))
    np.testing.assert_allclose(r[400:500], heisenberg.scale(1e3, r[:100]))
    vertical = p[500:]
    assert np.all(np.abs(vertical[:, :2]) <= 1e-3)
    np.testing.assert_array_equal(vertical[:, 2], p[:100, 2])


def test_gauge_triangle_holds_on_every_triple(heisenberg, gauge_backend):
    p, q, r = quasi_triangle_triples(heisenberg, 500, seed=9)
    lhs = gauge_backend.distance(p, r)
    rhs = gauge_backend.distance(p, q) + gauge_backend.distance(q, r)
    assert np.all(lhs <= rhs * (1.0 + 1e-9))


def test_c1_on_a_euclidean_plane(abelian3, euclidean_backend):
    coset = VerticalCoset(abelian3, [-1.0, 0.0, 0.0], 1.0)
    c1, counts = estimate_c1(euclidean_backend, coset, Ball(coset.base, 0.5), [0.2, 0.1, 0.05],
                             samples=4096, seed=3, safety=1.0)
    assert 1.0 <= c1 <= 4.0
    assert 2.5 <= counts[0.1] / counts[0.2] <= 5.5
    assert 2.5 <= counts[0.05] / counts[0.1] <= 5.5


@pytest.mark.slow
def test_packing_counts_grow_with_exponent_q_minus_one(heisenberg, gauge_backend):
    coset = VerticalCoset(heisenberg, [-1.0, 0.0], 1.0)
    _, counts = estimate_c1(gauge_backend, coset, Ball(coset.base, 2.0), [0.1, 0.05],
                            samples=100_000, seed=3, safety=1.0)
    assert np.log2(counts[0.05] / counts[0.1]) == pytest.approx(3.0, abs=0.3)

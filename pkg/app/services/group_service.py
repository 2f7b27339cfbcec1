import time
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigError, EmptyIntersection, NonPositiveScale, QBelowThree
from app.core.logging import get_logger
from app.models.schemas import MetricKind
from app.services.algebra_service import StratifiedAlgebra, bch_product, check_dims
from app.utils import sampling

logger = get_logger(__name__)


def homogeneous_dimension(alg: StratifiedAlgebra) -> int:
    """Q = sum of i * dim(layer i); the construction needs Q >= 3."""
    q = int(sum(i * d for i, d in enumerate(alg.layer_dims, start=1)))
    if q < 3:
        raise QBelowThree(
            f"homogeneous dimension {q} is below 3; Q >= 3 required",
            {"Q": q, "layer_dims": list(alg.layer_dims)},
        )
    return q


class CarnotGroup:
    """Group law, dilations and the box norm in graded exponential coordinates."""

    def __init__(self, algebra: StratifiedAlgebra):
        self.algebra = algebra
        self.Q = homogeneous_dimension(algebra)
        self.N = algebra.total_dim
        self.m = algebra.horizontal_dim
        self.step = algebra.step
        self.degrees = algebra.degrees.astype(float)
        self.layer_slices = algebra.layer_slices

    def identity(self) -> np.ndarray:
        return np.zeros(self.N)

    def multiply(self, p, q) -> np.ndarray:
        return bch_product(p, q, self.algebra)

    def inverse(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        check_dims(self.algebra, p)
        return -p

    def scale(self, t, p) -> np.ndarray:
        """δ_t for t >= 0; δ_0 collapses to the identity."""
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        return p * np.power(t[..., None], self.degrees)

    def dilate(self, t: float, p) -> np.ndarray:
        if np.any(np.asarray(t) <= 0):
            raise NonPositiveScale("dilation factor must be positive", {"t": np.asarray(t).tolist()})
        p = np.asarray(p, dtype=float)
        check_dims(self.algebra, p)
        return self.scale(t, p)

    def layer_norms(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.stack([np.linalg.norm(p[..., s], axis=-1) for s in self.layer_slices], axis=-1)

    def box_norm(self, p) -> np.ndarray:
        norms = self.layer_norms(p)
        powers = 1.0 / np.arange(1, self.step + 1)
        return np.sum(norms ** powers, axis=-1)

    def exp_horizontal(self, v) -> np.ndarray:
        """Point with layer-1 block v and zero elsewhere."""
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape[:-1] + (self.N,))
        out[..., : self.m] = v
        return out

    def random_points(self, n: int, seed: int, label: str, scale: float = 1.0) -> np.ndarray:
        return scale * (2.0 * sampling.chunked_uniform(seed, label, n, self.N) - 1.0)


class MetricBackend:
    """Left-invariant homogeneous quasi-distance d(p, q) = ||p^-1 q||."""

    def __init__(self, group: CarnotGroup, kind: MetricKind, kernel=None, quasi_triangle_constant: float = 1.0):
        if kind == MetricKind.GAUGE and kernel is None:
            raise ConfigError("gauge metric needs an H-type kernel", {"group": group.algebra.name})
        self.group = group
        self.kind = MetricKind(kind)
        self.kernel = kernel
        self.quasi_triangle_constant = float(quasi_triangle_constant)

    def norm(self, p) -> np.ndarray:
        if self.kind == MetricKind.GAUGE:
            return self.kernel.gauge_norm(p)
        return self.group.box_norm(p)

    def distance(self, p, q) -> np.ndarray:
        g = self.group
        return self.norm(g.multiply(g.inverse(p), q))

    def coordinate_bounds(self, radius: float) -> np.ndarray:
        """Per-coordinate |p_k| bound for ||p|| <= radius."""
        if self.kind == MetricKind.GAUGE:
            per_layer = [radius, radius ** 2 / 4.0][: self.group.step]
        else:
            per_layer = [radius ** j for j in range(1, self.group.step + 1)]
        return np.repeat(np.asarray(per_layer, dtype=float), self.group.algebra.layer_dims)

    def layer_step(self, delta: float, layer: int) -> float:
        """Coordinate spacing in a layer whose pure displacement has norm delta."""
        if self.kind == MetricKind.GAUGE and layer == 2:
            return delta ** 2 / 4.0
        return delta ** layer

    def describe(self) -> dict:
        return {"kind": self.kind.value, "quasi_triangle_constant": self.quasi_triangle_constant}


def build_backend(group: CarnotGroup, kind: MetricKind, c_gamma: float = 1.0) -> MetricBackend:
    kernel = None
    if MetricKind(kind) == MetricKind.GAUGE:
        from app.services.potential_service import HTypeKernel

        kernel = HTypeKernel(group, c_gamma=c_gamma)
    return MetricBackend(group, kind, kernel=kernel)


def distance(backend: MetricBackend, p, q) -> np.ndarray:
    return backend.distance(p, q)


def unit_sphere_points(backend: MetricBackend, n: int, seed: int, label: str = "sphere") -> np.ndarray:
    """Gaussian directions pushed onto the unit sphere of the backend norm by dilation."""
    g = backend.group
    z = sampling.chunked_normal(seed, label, n, g.N)
    nz = backend.norm(z)
    nz[nz == 0] = 1.0
    return g.scale(1.0 / nz, z)


def estimate_c0(
    backend: MetricBackend,
    sphere_samples: Optional[int] = None,
    r_samples: Optional[int] = None,
    seed: Optional[int] = None,
    safety: Optional[float] = None,
) -> float:
    """Sampled sup of d(δ_r q, q) over the unit sphere and r in [0, 1], times a safety factor."""
    sphere_samples = sphere_samples or settings.sphere_samples
    r_samples = r_samples or settings.radius_samples
    seed = settings.default_seed if seed is None else seed
    safety = settings.safety_c0 if safety is None else safety

    q = unit_sphere_points(backend, sphere_samples, seed, "c0-sphere")
    best = 0.0
    for r in np.linspace(0.0, 1.0, r_samples):
        d = backend.distance(backend.group.scale(r, q), q)
        best = max(best, float(np.max(d)))
    logger.info("Estimated C0", raw=best, safety=safety, sphere_samples=sphere_samples, r_samples=r_samples)
    return best * safety


def greedy_packing(backend: MetricBackend, points: np.ndarray, eps: float) -> np.ndarray:
    """Indices of a maximal eps-separated subset, chosen in sample order.

    Every sample ends within eps of some chosen point, which witnesses
    maximality over the sample set.
    """
    covered = np.zeros(len(points), dtype=bool)
    chosen = []
    for idx in range(len(points)):
        if covered[idx]:
            continue
        chosen.append(idx)
        covered |= backend.distance(points[idx], points) < eps
    return np.asarray(chosen, dtype=int)


def packing_count(backend: MetricBackend, points: np.ndarray, eps: float) -> int:
    return int(len(greedy_packing(backend, points, eps)))


def estimate_c1(
    backend: MetricBackend,
    coset,
    ball,
    eps_grid: Sequence[float],
    samples: Optional[int] = None,
    seed: Optional[int] = None,
    safety: Optional[float] = None,
) -> Tuple[float, dict]:
    """Smallest C1 >= 1 with C1^-1 eps^(1-Q) <= M(eps) <= C1 eps^(1-Q) over the grid, times safety.

    Packings use separation eps * diam B, matching the center selection.
    """
    samples = samples or settings.coset_samples
    seed = settings.default_seed if seed is None else seed
    safety = settings.safety_c1 if safety is None else safety
    pts = coset.sample_in_ball(backend, ball, samples, seed, label="c1-coset")
    if len(pts) == 0:
        raise EmptyIntersection(
            "the ball does not meet the coset",
            {"ball_radius": ball.radius, "a": coset.a},
        )
    q = backend.group.Q
    counts = {}
    c1 = 1.0
    for eps in eps_grid:
        m = packing_count(backend, pts, eps * ball.diameter)
        counts[float(eps)] = m
        scaled = m * eps ** (q - 1)
        c1 = max(c1, scaled, 1.0 / scaled)
    logger.info("Estimated C1", raw=c1, safety=safety, counts=counts)
    return c1 * safety, counts


TRIANGLE_SCALES = (1e-3, 1e-1, 10.0, 1e3)


def quasi_triangle_triples(group: CarnotGroup, samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform cube triples, their dilates δ_t at several scales, and triples hugging the vertical axis."""
    p = group.random_points(samples, seed, "triangle-p")
    q = group.random_points(samples, seed, "triangle-q")
    r = group.random_points(samples, seed, "triangle-r")
    flat = np.ones(group.N)
    flat[: group.m] = 1e-3
    parts = [(p, q, r)]
    parts += [(group.scale(t, p), group.scale(t, q), group.scale(t, r)) for t in TRIANGLE_SCALES]
    parts.append((p * flat, q * flat, r * flat))
    return tuple(np.concatenate([part[k] for part in parts]) for k in range(3))


def certify_quasi_triangle(backend: MetricBackend, samples: Optional[int] = None, seed: Optional[int] = None) -> float:
    """Empirical c with d(p,r) <= c (d(p,q) + d(q,r)); stored on the backend."""
    samples = samples or settings.triangle_samples
    seed = settings.default_seed if seed is None else seed
    p, q, r = quasi_triangle_triples(backend.group, samples, seed)
    lhs = backend.distance(p, r)
    rhs = backend.distance(p, q) + backend.distance(q, r)
    ok = rhs > 0
    ratio = float(np.max(lhs[ok] / rhs[ok])) if np.any(ok) else 1.0
    backend.quasi_triangle_constant = max(1.0, ratio)
    logger.info("Certified quasi-triangle constant", kind=backend.kind.value,
                constant=backend.quasi_triangle_constant, triples=len(p))
    return backend.quasi_triangle_constant


def norm_equivalence(group: CarnotGroup, kernel, samples: int = 100_000, seed: Optional[int] = None) -> Tuple[float, float, float]:
    """Interval [lo, hi] of box/gauge norm ratios and c = max(hi, 1/lo)."""
    seed = settings.default_seed if seed is None else seed
    started = time.perf_counter()
    p = group.random_points(samples, seed, "norm-equivalence")
    gauge = kernel.gauge_norm(p)
    ok = gauge > 0
    ratio = group.box_norm(p[ok]) / gauge[ok]
    lo, hi = float(np.min(ratio)), float(np.max(ratio))
    c = max(hi, 1.0 / lo)
    logger.info("Measured norm equivalence", lo=lo, hi=hi, c=c,
                elapsed_ms=round((time.perf_counter() - started) * 1000, 2))
    return lo, hi, c

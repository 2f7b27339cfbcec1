from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from app.core.config import settings
from app.core.exceptions import DegenerateConfiguration, NotHType, OriginSingularity
from app.core.logging import get_logger
from app.services.algebra_service import left_invariant_frame
from app.utils import sampling
from app.utils.reduction import deterministic_sum

logger = get_logger(__name__)


def _h_type_matrices(algebra) -> np.ndarray:
    """J_l[i][j] = c[i][j][m+l], checked for J_l J_l' + J_l' J_l = -2 δ I exactly."""
    m = algebra.horizontal_dim
    centre = algebra.total_dim - m
    mats = [[[Fraction(0)] * m for _ in range(m)] for _ in range(centre)]
    for (i, j, k), c in algebra.structure_constants.items():
        if i < m and j < m and k >= m:
            mats[k - m][i][j] = c
    for l in range(centre):
        for l2 in range(l, centre):
            for i in range(m):
                for j in range(m):
                    s = sum(mats[l][i][x] * mats[l2][x][j] + mats[l2][i][x] * mats[l][x][j] for x in range(m))
                    want = Fraction(-2) if (l == l2 and i == j) else Fraction(0)
                    if s != want:
                        raise NotHType(
                            f"{algebra.name} is not of H-type: J{l + 1}J{l2 + 1} + J{l2 + 1}J{l + 1} "
                            f"differs from -2δ I at ({i + 1},{j + 1})",
                            {"pair": [l + 1, l2 + 1], "entry": [i + 1, j + 1], "value": str(s)},
                        )
    return np.array([[[float(x) for x in row] for row in mat] for mat in mats]).reshape(centre, m, m)


class HTypeKernel:
    """Γ = c N^(2-Q) with the Kaplan gauge N = (|x|^4 + 16|t|^2)^(1/4), and k = ∇_G Γ."""

    def __init__(self, group, c_gamma: float = 1.0):
        if group.step > 2:
            raise NotHType(
                f"{group.algebra.name} has step {group.step}; the closed-form kernel needs step <= 2",
                {"step": group.step},
            )
        self.group = group
        self.Q = group.Q
        self.m = group.m
        self.c_gamma = float(c_gamma)
        self.J = _h_type_matrices(group.algebra) if group.step == 2 else np.zeros((0, group.m, group.m))
        self._exponent = (2.0 - self.Q) / 4.0

    def _split(self, p):
        p = np.asarray(p, dtype=float)
        return p[..., : self.m], p[..., self.m:]

    def _u(self, p) -> np.ndarray:
        x, t = self._split(p)
        x2 = np.sum(x * x, axis=-1)
        return x2 * x2 + 16.0 * np.sum(t * t, axis=-1)

    def _require_nonzero(self, u: np.ndarray, what: str) -> None:
        if np.any(u == 0):
            raise OriginSingularity(f"{what} is singular at the origin", {"count": int(np.sum(u == 0))})

    def gauge_norm(self, p) -> np.ndarray:
        return self._u(p) ** 0.25

    def gamma(self, p) -> np.ndarray:
        u = self._u(p)
        self._require_nonzero(u, "Γ")
        return self.c_gamma * u ** self._exponent

    def horizontal_gradient_u(self, p) -> np.ndarray:
        """X_j u through the left-invariant frame, shape (..., m)."""
        p = np.asarray(p, dtype=float)
        x, t = self._split(p)
        x2 = np.sum(x * x, axis=-1, keepdims=True)
        grad = np.concatenate([4.0 * x2 * x, 32.0 * t], axis=-1)
        frame = left_invariant_frame(self.group.algebra, p)
        return np.einsum("...k,...kj->...j", grad, frame)

    def kernel(self, p) -> np.ndarray:
        u = self._u(p)
        self._require_nonzero(u, "k")
        scale = self.c_gamma * self._exponent * u ** (self._exponent - 1.0)
        return scale[..., None] * self.horizontal_gradient_u(p)

    def omega(self, p) -> np.ndarray:
        """Degree-zero angular part N^(Q-1) k."""
        n = self.gauge_norm(p)
        return (n ** (self.Q - 1))[..., None] * self.kernel(p)

    def describe(self) -> dict:
        return {"Q": self.Q, "c_gamma": self.c_gamma, "center_dim": int(self.J.shape[0])}


def gauge_norm(ker: HTypeKernel, p) -> np.ndarray:
    return ker.gauge_norm(p)


def gamma(ker: HTypeKernel, p) -> np.ndarray:
    return ker.gamma(p)


def kernel(ker: HTypeKernel, p) -> np.ndarray:
    return ker.kernel(p)


def omega(ker: HTypeKernel, p) -> np.ndarray:
    return ker.omega(p)


def horizontal_derivative(group, f: Callable, p, i: int, h: float):
    """Central difference of s -> f(p . exp(s X_i)) at s = 0."""
    e = np.zeros(group.N)
    e[i] = h
    forward = f(group.multiply(p, e))
    backward = f(group.multiply(p, -e))
    return (forward - backward) / (2.0 * h)


def sublaplacian_residual(ker: HTypeKernel, p, h: float) -> np.ndarray:
    """Sum of second differences of Γ along the horizontal flows."""
    g = ker.group
    p = np.asarray(p, dtype=float)
    centre = ker.gamma(p)
    total = np.zeros_like(centre)
    for i in range(g.m):
        e = np.zeros(g.N)
        e[i] = h
        total = total + (ker.gamma(g.multiply(p, e)) - 2.0 * centre + ker.gamma(g.multiply(p, -e))) / (h * h)
    return total


def gamma_lipschitz_ratio(ker: HTypeKernel, backend, p1, p2, q) -> float:
    p1, p2, q = (np.asarray(x, dtype=float) for x in (p1, p2, q))
    if np.array_equal(q, p1) or np.array_equal(q, p2):
        raise DegenerateConfiguration("q coincides with p1 or p2", {"q": q.tolist()})
    if np.array_equal(p1, p2):
        return 0.0
    g = ker.group
    qi = g.inverse(q)
    num = abs(float(ker.gamma(g.multiply(qi, p1)) - ker.gamma(g.multiply(qi, p2))))
    d12 = float(backend.distance(p1, p2))
    den = d12 * (float(backend.distance(q, p1)) ** (1 - ker.Q) + float(backend.distance(q, p2)) ** (1 - ker.Q))
    return num / den


def gamma_lipschitz_scan(ker: HTypeKernel, backend, samples: int, seed: Optional[int] = None) -> float:
    """Max of the Lipschitz ratio over random triples."""
    seed = settings.default_seed if seed is None else seed
    g = ker.group
    p1 = g.random_points(samples, seed, "lip-p1")
    p2 = g.random_points(samples, seed, "lip-p2")
    q = g.random_points(samples, seed, "lip-q")
    qi = g.inverse(q)
    d12 = backend.distance(p1, p2)
    dq1 = backend.distance(q, p1)
    dq2 = backend.distance(q, p2)
    ok = (d12 > 0) & (dq1 > 0) & (dq2 > 0)
    num = np.abs(ker.gamma(g.multiply(qi[ok], p1[ok])) - ker.gamma(g.multiply(qi[ok], p2[ok])))
    den = d12[ok] * (dq1[ok] ** (1 - ker.Q) + dq2[ok] ** (1 - ker.Q))
    ratio = float(np.max(num / den))
    logger.info("Scanned Γ Lipschitz ratio", samples=samples, max_ratio=ratio)
    return ratio


def riesz_potential(ker: HTypeKernel, mu, p) -> np.ndarray:
    """Σ weight Γ(q^-1 p) over the atoms of mu, for one point or a batch."""
    g = ker.group
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    probes = np.atleast_2d(p)
    out = np.empty(len(probes))
    for n, z in enumerate(probes):
        vals = ker.gamma(g.multiply(g.inverse(mu.points), z))
        out[n] = deterministic_sum(vals, axis0_weights=mu.weights)
    return out[0] if single else out


def potential_harmonicity_residual(ker: HTypeKernel, mu, p, h: float) -> float:
    g = ker.group
    p = np.asarray(p, dtype=float)
    centre = riesz_potential(ker, mu, p)
    total = 0.0
    for i in range(g.m):
        e = np.zeros(g.N)
        e[i] = h
        total += (riesz_potential(ker, mu, g.multiply(p, e)) - 2.0 * centre
                  + riesz_potential(ker, mu, g.multiply(p, -e))) / (h * h)
    return float(total)


def potential_lipschitz_ratio(ker: HTypeKernel, backend, mu, samples: int, clearance: float,
                              seed: Optional[int] = None) -> float:
    """Max |f(p1) - f(p2)| / d(p1, p2) over sampled pairs farther than `clearance` from every atom."""
    seed = settings.default_seed if seed is None else seed
    g = ker.group
    extent = float(np.max(np.abs(mu.points))) + 2.0 * clearance + 1.0
    cand = g.random_points(4 * samples, seed, "potential-lip", scale=extent)
    keep = []
    for n, z in enumerate(cand):
        if float(np.min(backend.distance(z, mu.points))) > clearance:
            keep.append(n)
        if len(keep) >= 2 * samples:
            break
    pts = cand[keep]
    half = len(pts) // 2
    if half == 0:
        return 0.0
    p1, p2 = pts[:half], pts[half: 2 * half]
    f1 = riesz_potential(ker, mu, p1)
    f2 = riesz_potential(ker, mu, p2)
    d = backend.distance(p1, p2)
    ok = d > 0
    ratio = float(np.max(np.abs(f1[ok] - f2[ok]) / d[ok]))
    logger.info("Scanned potential Lipschitz ratio", pairs=int(half), max_ratio=ratio, clearance=clearance)
    return ratio


def kernel_size_constant(ker: HTypeKernel, samples: int = 20_000, seed: Optional[int] = None) -> float:
    """Max |Ω| over the unit gauge sphere."""
    seed = settings.default_seed if seed is None else seed
    g = ker.group
    z = sampling.chunked_normal(seed, "kernel-size", samples, g.N)
    z = g.scale(1.0 / ker.gauge_norm(z), z)
    return float(np.max(np.linalg.norm(ker.omega(z), axis=-1)))


def kernel_smoothness_constant(ker: HTypeKernel, samples: int = 20_000, seed: Optional[int] = None,
                               safety: Optional[float] = None) -> float:
    """Sampled C with |k(X Y) - k(X)| <= C ||Y|| ||X||^-Q whenever ||Y|| <= ||X|| / 2.

    Homogeneity lets X range over the unit sphere only.
    """
    seed = settings.default_seed if seed is None else seed
    safety = settings.safety_smooth if safety is None else safety
    g = ker.group
    x = sampling.chunked_normal(seed, "smooth-x", samples, g.N)
    x = g.scale(1.0 / ker.gauge_norm(x), x)
    y = sampling.chunked_normal(seed, "smooth-y", samples, g.N)
    radius = 0.5 * np.maximum(sampling.chunked_uniform(seed, "smooth-r", samples, 1)[:, 0], 1e-6)
    y = g.scale(radius / ker.gauge_norm(y), y)
    diff = np.linalg.norm(ker.kernel(g.multiply(x, y)) - ker.kernel(x), axis=-1)
    ratio = float(np.max(diff / ker.gauge_norm(y)))
    logger.info("Estimated kernel smoothness constant", raw=ratio, safety=safety, samples=samples)
    return ratio * safety

import itertools
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq

from app.core.config import settings
from app.core.exceptions import (
    BallTooLarge,
    CertificationFailure,
    ConeViolation,
    ConfigError,
    ConstructionError,
    DepthOverflow,
    NotHType,
    ShrinkEpsilon,
)
from app.core.logging import get_logger
from app.models.schemas import (
    CenterRule,
    ConstructionParameters,
    GroupConfig,
    InclusionReport,
    MetricKind,
    PieceGap,
    ProjectionGap,
    RadiusRule,
    RunConfig,
    SeparationCertificate,
    SystemRecord,
)
from app.services.algebra_service import algebra_from_config
from app.services.group_service import (
    CarnotGroup,
    MetricBackend,
    certify_quasi_triangle,
    estimate_c0,
    estimate_c1,
    greedy_packing,
)
from app.services.potential_service import HTypeKernel
from app.utils import sampling
from app.utils.word_tree import (
    SimilarityFamily,
    WordNodes,
    box_levels,
    box_tree_gaps,
    cloud_diameter,
    invariant_box,
    uniform_tree,
)

logger = get_logger(__name__)

CONE_LADDER = [2.0 ** -k for k in range(0, 11)]
BALL_LADDER = [2.0 ** -k for k in range(0, 31)]


def _knob(value, default):
    return default if value is None else value


# Geometry of the construction

class VerticalCoset:
    """W_a = exp(a v) . W with W = exp(v^perp x layer 2 x ... x layer s)."""

    def __init__(self, group: CarnotGroup, direction, a: float):
        v = np.asarray(direction, dtype=float)
        if v.shape != (group.m,) or not np.any(v):
            raise ConfigError("coset direction must be a nonzero horizontal vector", {"direction": v.tolist()})
        if a == 0:
            raise ConstructionError("coset offset a must be nonzero", {"a": a})
        self.group = group
        self.v = v / np.linalg.norm(v)
        self.a = float(a)
        self.perp = null_space(self.v[None, :])
        self.base = group.exp_horizontal(self.a * self.v)

    @property
    def dim(self) -> int:
        return self.group.N - 1

    def project(self, p) -> np.ndarray:
        """P_V: the v-component of the layer-1 block."""
        return np.asarray(p, dtype=float)[..., : self.group.m] @ self.v

    def w_vector(self, coords) -> np.ndarray:
        """Point of W from its N-1 coordinates (v-perp basis, then higher layers)."""
        coords = np.asarray(coords, dtype=float)
        m = self.group.m
        out = np.zeros(coords.shape[:-1] + (self.group.N,))
        out[..., :m] = coords[..., : m - 1] @ self.perp.T
        out[..., m:] = coords[..., m - 1:]
        return out

    def w_bounds(self, backend: MetricBackend, radius: float) -> np.ndarray:
        bounds = backend.coordinate_bounds(radius)
        return np.concatenate([np.full(self.group.m - 1, bounds[0]), bounds[self.group.m:]])

    def sample_in_ball(self, backend: MetricBackend, ball: "Ball", n: int, seed: int, label: str = "coset") -> np.ndarray:
        """Quasi-random points of W_a inside the ball, as ball.center . w with ||w|| <= R."""
        u = sampling.sobol_points(self.dim, n, seed, label)
        coords = (2.0 * u - 1.0) * self.w_bounds(backend, ball.radius)
        w = self.w_vector(coords)
        keep = backend.norm(w) <= ball.radius
        return self.group.multiply(ball.center, w[keep])


@dataclass
class Ball:
    center: np.ndarray
    radius: float

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


class DilationCone:
    """Û: p lies in the cone when δ_{1/||p||} p is within `radius` of `center` on the unit sphere."""

    def __init__(self, backend: MetricBackend, center, radius: float, component: int):
        self.backend = backend
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.component = int(component)

    def sphere_distance(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        n = self.backend.norm(p)
        safe = np.where(n > 0, n, 1.0)
        q = self.backend.group.scale(1.0 / safe, p)
        d = self.backend.distance(self.center, q)
        return np.where(n > 0, d, 0.0)

    def contains(self, p) -> np.ndarray:
        return self.sphere_distance(p) <= self.radius * (1.0 + 1e-12)

    def margin(self, p) -> float:
        return float(np.min(self.radius - self.sphere_distance(p)))


def _ball_samples(backend: MetricBackend, center, radius: float, n: int, seed: int, label: str) -> np.ndarray:
    """center . w for w filling the backend ball of the given radius, half of them on its boundary."""
    g = backend.group
    w = sampling.chunked_normal(seed, label, n, g.N)
    nw = backend.norm(w)
    nw[nw == 0] = 1.0
    s = sampling.chunked_uniform(seed, label + "-radius", n, 1)[:, 0]
    s[: n // 2] = 1.0
    w = g.scale(radius * s / nw, w)
    return g.multiply(center, w)


def choose_cone(group: CarnotGroup, backend: MetricBackend, kernel: Optional[HTypeKernel],
                component: int, radius: Union[str, float] = "auto", margin: float = 0.1,
                samples: Optional[int] = None, seed: Optional[int] = None) -> DilationCone:
    """Sphere ball around exp(-e_i) on which the kernel component Ω_i stays positive."""
    samples = samples or settings.cone_samples
    seed = settings.default_seed if seed is None else seed
    i = component - 1
    if not 0 <= i < group.m:
        raise ConfigError(f"cone component {component} outside 1..{group.m}", {"component": component})
    e = np.zeros(group.m)
    e[i] = -1.0
    center = group.exp_horizontal(e)
    center = group.scale(1.0 / backend.norm(center), center)

    def omega_floor(rho: float) -> float:
        cone = DilationCone(backend, center, rho, i)
        pts = _ball_samples(backend, center, rho, samples, seed, f"cone-{rho}")
        pts = pts[cone.contains(pts)]
        pts = np.vstack([center[None, :], pts])
        return float(np.min(kernel.omega(pts)[:, i]))

    if kernel is None:
        rho = 0.5 if radius == "auto" else float(radius)
        logger.info("Chose cone without kernel constraint", component=component, radius=rho)
        return DilationCone(backend, center, rho, i)

    if radius != "auto":
        floor = omega_floor(float(radius))
        if floor <= 0:
            raise ConeViolation(
                f"Ω_{component} changes sign inside the cone of radius {radius}",
                {"radius": float(radius), "min_omega": floor},
            )
        return DilationCone(backend, center, float(radius), i)

    threshold = margin * float(kernel.omega(center)[i])
    for rho in CONE_LADDER:
        floor = omega_floor(rho)
        if floor > threshold:
            logger.info("Chose cone", component=component, radius=rho, min_omega=floor, threshold=threshold)
            return DilationCone(backend, center, rho, i)
    raise ConeViolation(
        f"no cone radius keeps Ω_{component} above the margin",
        {"component": component, "threshold": threshold},
    )


def choose_ball(backend: MetricBackend, cone: DilationCone, coset: VerticalCoset, c0: float,
                ball_radius: Union[str, float] = "auto", samples: Optional[int] = None,
                seed: Optional[int] = None) -> Ball:
    """Largest ladder radius R with (1 + 2 C0) B(center, R) inside the cone and diam B <= 2."""
    samples = samples or settings.cone_samples
    seed = settings.default_seed if seed is None else seed
    center = coset.base
    if not cone.contains(center)[0]:
        raise ConeViolation("ball center exp(a v) lies outside the cone", {"a": coset.a})

    def fits(radius: float) -> bool:
        pts = _ball_samples(backend, center, (1.0 + 2.0 * c0) * radius, samples, seed, f"ball-{radius}")
        return bool(np.all(cone.contains(pts)))

    if ball_radius != "auto":
        radius = float(ball_radius)
        if 2.0 * radius > 2.0:
            raise BallTooLarge(f"diam B = {2 * radius} exceeds 2", {"radius": radius})
        if not fits(radius):
            raise ConeViolation("the enlarged ball (1 + 2 C0) B leaves the cone", {"radius": radius, "c0": c0})
        return Ball(center, radius)

    for radius in BALL_LADDER:
        if fits(radius):
            logger.info("Chose ball", radius=radius, c0=c0)
            return Ball(center, radius)
    raise ConeViolation("no ball radius fits inside the cone", {"c0": c0})


# Centers and parameters

def select_centers(backend: MetricBackend, coset: VerticalCoset, ball: Ball, eps: float,
                   seed: Optional[int] = None, samples: Optional[int] = None,
                   rule: CenterRule = CenterRule.GREEDY, max_centers: Optional[int] = None,
                   cone: Optional[DilationCone] = None, grid: Optional[List[int]] = None) -> np.ndarray:
    """eps * diam B separated coset points inside the ball; maximal for the greedy and lattice rules."""
    seed = settings.default_seed if seed is None else seed
    samples = samples or settings.coset_samples
    max_centers = max_centers or settings.max_centers
    if ball.diameter > 2.0:
        raise BallTooLarge(f"diam B = {ball.diameter} exceeds 2", {"radius": ball.radius})
    if abs(float(coset.project(ball.center)) - coset.a) > 1e-10:
        raise ConeViolation("ball center is not on the coset", {"a": coset.a})
    if cone is not None and not cone.contains(ball.center)[0]:
        raise ConeViolation("ball center lies outside the cone", {"cone_radius": cone.radius})

    separation = eps * ball.diameter
    if CenterRule(rule) == CenterRule.GRID:
        candidates = _grid_centers(backend, coset, ball, separation, grid or [])
    elif CenterRule(rule) == CenterRule.LATTICE:
        candidates = _lattice_candidates(backend, coset, ball, separation * (1.0 + 1e-6), samples)
    else:
        candidates = coset.sample_in_ball(backend, ball, samples, seed, label="centers")
        candidates = np.vstack([ball.center[None, :], candidates])
    chosen = greedy_packing(backend, candidates, separation * (1.0 - 1e-12))
    if len(chosen) > max_centers:
        raise ConstructionError(
            f"{len(chosen)} centers exceed the configured maximum {max_centers}",
            {"epsilon": eps, "max_centers": max_centers},
        )
    logger.info("Selected centers", rule=CenterRule(rule).value, epsilon=eps, M=int(len(chosen)),
                candidates=int(len(candidates)))
    return candidates[chosen]


def _grid_centers(backend: MetricBackend, coset: VerticalCoset, ball: Ball, spacing: float,
                  counts: List[int]) -> np.ndarray:
    """Product grid in coset coordinates, centred on the ball center, nearest points first.

    Neighbours along a coordinate of layer k sit layer_step(spacing, k) apart,
    so the grid is spacing-separated but not a maximal packing.
    """
    g = coset.group
    layers = [1] * (g.m - 1) + [k for k in range(2, g.step + 1) for _ in range(g.algebra.layer_dims[k - 1])]
    if len(counts) != len(layers):
        raise ConfigError(
            f"grid needs {len(layers)} counts, one per coset coordinate; got {len(counts)}",
            {"grid": list(counts), "coordinates": len(layers)},
        )
    axes = [(np.arange(n) - (n - 1) / 2.0) * backend.layer_step(spacing, k) for n, k in zip(counts, layers)]
    coords = np.array(list(itertools.product(*axes)))
    w = coset.w_vector(coords)
    norms = backend.norm(w)
    if float(np.max(norms)) > ball.radius:
        raise ShrinkEpsilon(
            "grid leaves the ball",
            {"failed": "grid_inside_ball", "max_norm": float(np.max(norms)), "radius": ball.radius},
        )
    order = np.lexsort((np.arange(len(norms)), norms))
    return g.multiply(ball.center, w[order])


def _lattice_candidates(backend: MetricBackend, coset: VerticalCoset, ball: Ball, spacing: float, budget: int) -> np.ndarray:
    g = coset.group
    steps = [backend.layer_step(spacing, 1)] * (g.m - 1)
    for layer in range(2, g.step + 1):
        steps += [backend.layer_step(spacing, layer)] * g.algebra.layer_dims[layer - 1]
    steps = np.asarray(steps)
    bounds = coset.w_bounds(backend, ball.radius)
    counts = np.floor(bounds / steps).astype(int)
    total = int(np.prod(2 * counts + 1))
    if total > 4 * budget:
        raise DepthOverflow(
            f"lattice needs {total} candidates, above the budget {4 * budget}",
            {"spacing": spacing, "budget": budget},
        )
    axes = [np.arange(-c, c + 1) * s for c, s in zip(counts, steps)]
    coords = np.array(list(itertools.product(*axes))) if axes else np.zeros((1, 0))
    w = coset.w_vector(coords)
    norms = backend.norm(w)
    keep = norms <= ball.radius
    w, norms = w[keep], norms[keep]
    order = np.lexsort((np.arange(len(norms)), norms))
    return g.multiply(ball.center, w[order])


def solve_r0(M: int, r: float, Q: int) -> float:
    """r0 from r0^(Q-1) + M r^(Q-1) = 1."""
    rest = 1.0 - M * r ** (Q - 1)
    if rest <= 0:
        return 0.0
    return rest ** (1.0 / (Q - 1))


def kprime_dimension(M: int, r: float) -> float:
    return float(np.log(M) / np.log(1.0 / r))


def make_parameters(eps: float, r: float, M: int, Q: int, c0: float, c1: float,
                    ball_diameter: float, rule: RadiusRule) -> ConstructionParameters:
    r0 = solve_r0(M, r, Q)
    floor = ball_diameter ** (Q - 1) / (2 ** (Q - 1) * c1 ** 2 * (10 + 50 * c0 * ball_diameter) ** (Q - 1))
    return ConstructionParameters(
        epsilon=eps, r=r, r0=r0, M=M, Q=Q, c0=c0, c1=c1, ball_diameter=ball_diameter,
        radius_rule=rule,
        mass_identity_residual=abs(r0 ** (Q - 1) + M * r ** (Q - 1) - 1.0),
        packing_lower_bound_ok=bool(M * r ** (Q - 1) >= floor),
        kprime_dimension=kprime_dimension(M, r) if M > 1 else 0.0,
    )


def _balanced_radius(M: int, Q: int, balance: float) -> float:
    r_max = min(0.5, M ** (-1.0 / (Q - 1))) * (1.0 - 1e-9)

    def excess(r: float) -> float:
        return r + solve_r0(M, r, Q) - 1.0

    lo = min(0.5 * ((Q - 1) / M) ** (1.0 / (Q - 2)), 0.5 * r_max)
    if excess(r_max) >= 0:
        raise ShrinkEpsilon(
            "no ratio satisfies r0 + r < 1 for this M",
            {"failed": "r0_plus_r", "M": M, "r_max": r_max},
        )
    if excess(lo) <= 0:
        r_lo = lo
    else:
        r_lo = brentq(excess, lo, r_max, xtol=1e-14)
    return r_lo + balance * (r_max - r_lo)


def derive_parameters(ball: Ball, eps: float, c0: float, c1: float, Q: int, M: int,
                      rule: RadiusRule = RadiusRule.STRICT, balance: Optional[float] = None) -> ConstructionParameters:
    """r and r0 from M and eps; ShrinkEpsilon names the first failed inequality."""
    diam = ball.diameter
    rule = RadiusRule(rule)
    if rule == RadiusRule.BALANCED:
        r = _balanced_radius(M, Q, _knob(balance, settings.balance))
    else:
        r = eps * diam / (2.0 * c1 ** (1.0 / (Q - 1)) * (10.0 + 50.0 * c0 * diam))
    params = make_parameters(eps, r, M, Q, c0, c1, diam, rule)

    checks = [
        ("M_at_least_2^(Q-1)", M >= 2 ** (Q - 1)),
        ("r_below_M^(1/(1-Q))", M * r ** (Q - 1) < 1.0),
        ("r_below_half", r < 0.5),
        ("r0_plus_r_below_1", params.r0 + r < 1.0),
    ]
    if rule == RadiusRule.STRICT:
        checks.append(("packing_lower_bound", bool(params.packing_lower_bound_ok)))
    for name, ok in checks:
        if not ok:
            raise ShrinkEpsilon(
                f"parameter check {name} failed at epsilon {eps:.4g}",
                {"failed": name, "epsilon": eps, "M": M, "r": r, "r0": params.r0, "Q": Q},
            )
    logger.info("Derived parameters", rule=rule.value, epsilon=eps, M=M, r=r, r0=params.r0,
                residual=params.mass_identity_residual)
    return params


# The system

def orbit_radius_bound(family: SimilarityFamily, backend: MetricBackend, anchor: np.ndarray) -> float:
    """R with S_i(B(anchor, R)) inside B(anchor, R) for every letter, hence K inside B(anchor, R)."""
    c = backend.quasi_triangle_constant
    images = family.apply(family.translations, family.ratios, anchor)
    d = backend.distance(anchor, images)
    lam = family.ratios
    if np.any(c * lam >= 1.0):
        raise CertificationFailure(
            "quasi-triangle constant too large for an invariant ball",
            {"quasi_triangle_constant": c, "max_ratio": float(lam.max())},
        )
    return float(np.max(c * d / (1.0 - c * lam)))


@dataclass
class IfsSystem:
    """S_0 = δ_r0 and S_i(p) = p_i . δ_r(p_i^-1 . p) with the data they were built from."""
    group: CarnotGroup
    backend: MetricBackend
    kernel: Optional[HTypeKernel]
    coset: VerticalCoset
    cone: DilationCone
    ball: Ball
    centers: np.ndarray
    params: ConstructionParameters
    group_config: Dict[str, Any]
    seed: int
    family: SimilarityFamily = field(init=False)
    anchor: np.ndarray = field(init=False)
    radius_bound: float = field(init=False)
    certificate: Optional[SeparationCertificate] = None
    attempts: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.family = SimilarityFamily.from_centers(self.group, self.centers, self.params.r, self.params.r0)
        self.anchor = self.centers[0]
        self.radius_bound = orbit_radius_bound(self.family, self.backend, self.anchor)

    @property
    def M(self) -> int:
        return int(len(self.centers))

    @property
    def ratios(self) -> np.ndarray:
        return self.family.ratios

    @property
    def separation(self) -> float:
        return self.params.epsilon * self.ball.diameter

    def to_record(self) -> SystemRecord:
        return SystemRecord(
            group=self.group_config,
            metric=self.backend.kind,
            quasi_triangle_constant=self.backend.quasi_triangle_constant,
            c_gamma=self.kernel.c_gamma if self.kernel is not None else 1.0,
            direction=self.coset.v.tolist(),
            a=self.coset.a,
            cone_center=self.cone.center.tolist(),
            cone_radius=self.cone.radius,
            cone_component=self.cone.component + 1,
            ball_center=self.ball.center.tolist(),
            ball_radius=self.ball.radius,
            centers=self.centers.tolist(),
            parameters=self.params,
            seed=self.seed,
            attempts=self.attempts,
        )

    @classmethod
    def from_record(cls, record: SystemRecord) -> "IfsSystem":
        group_cfg = GroupConfig(**record.group)
        group = CarnotGroup(algebra_from_config(group_cfg))
        kernel = _try_kernel(group, record.c_gamma)
        if record.metric == MetricKind.GAUGE and kernel is None:
            raise NotHType("gauge metric needs an H-type group", {"group": group.algebra.name})
        backend = MetricBackend(group, record.metric, kernel=kernel,
                                quasi_triangle_constant=record.quasi_triangle_constant)
        coset = VerticalCoset(group, record.direction, record.a)
        cone = DilationCone(backend, record.cone_center, record.cone_radius, record.cone_component - 1)
        ball = Ball(np.asarray(record.ball_center), record.ball_radius)
        return cls(group=group, backend=backend, kernel=kernel, coset=coset, cone=cone, ball=ball,
                   centers=np.asarray(record.centers), params=record.parameters,
                   group_config=record.group, seed=record.seed, attempts=list(record.attempts))


def _try_kernel(group: CarnotGroup, c_gamma: float) -> Optional[HTypeKernel]:
    try:
        return HTypeKernel(group, c_gamma=c_gamma)
    except NotHType:
        return None


def apply_map(system: IfsSystem, letter: int, p) -> np.ndarray:
    fam = system.family
    return fam.apply(fam.translations[letter], fam.ratios[letter], p)


def project_horizontal(coset: VerticalCoset, p) -> np.ndarray:
    return coset.project(p)


def attractor(system: IfsSystem, depth: int, budget: Optional[int] = None) -> WordNodes:
    """All words of length `depth`; representatives are nodes.points(system.family, system.anchor)."""
    return uniform_tree(system.family, depth, budget or settings.node_budget)


def node_radii(system: IfsSystem, nodes: WordNodes) -> np.ndarray:
    return nodes.ratios * system.radius_bound


def diameter_upper_bound(system: IfsSystem) -> float:
    """diam K from a small cloud plus node radii, capped by the invariant ball."""
    c = system.backend.quasi_triangle_constant
    depth = max(1, int(np.floor(np.log(2048) / np.log(system.family.size))))
    nodes = attractor(system, depth)
    pts = nodes.points(system.family, system.anchor)
    rad = float(np.max(node_radii(system, nodes)))
    cloud = cloud_diameter(system.backend, pts)
    return float(min(2.0 * c * system.radius_bound, c * c * cloud + (c + c * c) * rad))


def alpha_constants(letter_gaps, diam_k: float, word_gaps, word_ratios) -> Dict[str, Any]:
    """α_K from first-level gaps and from the gaps between siblings one level down.

    letter_gaps[i] is the distance from S_i K to the other first-level pieces;
    word_gaps[a] is the smallest distance between two children of S_a K, whose
    diameter is at most word_ratios[a] diam K.
    """
    by_letter = np.asarray(letter_gaps, dtype=float) / diam_k
    two = np.asarray(word_gaps, dtype=float) / (np.asarray(word_ratios, dtype=float) * diam_k)
    alpha_two = float(np.min(two)) if two.size else float("inf")
    return {
        "alpha_by_letter": [float(x) for x in by_letter],
        "alpha_length_two": alpha_two,
        "alpha_k": float(min(float(np.min(by_letter)), alpha_two)),
    }


def kprime_maps(system: IfsSystem) -> SimilarityFamily:
    """S_1..S_M written in coset coordinates u = exp(a v)^-1 . p."""
    g = system.group
    local = g.multiply(g.inverse(system.coset.base), system.centers)
    fam = SimilarityFamily.from_centers(g, local, system.params.r, system.params.r0)
    return SimilarityFamily(g, fam.translations[1:], fam.ratios[1:])


def _point_levels(fam: SimilarityFamily, start: np.ndarray, depth: int) -> List[np.ndarray]:
    levels = []
    pts = np.atleast_2d(start)
    for _ in range(depth):
        pts = fam.apply(fam.translations[:, None, :], fam.ratios[:, None], pts[None]).reshape(-1, fam.group.N)
        levels.append(pts)
    return levels


def separation_depth(M: int, depth: Optional[int] = None, budget: Optional[int] = None) -> int:
    """Box-tree depth, at least 2 and lowered until M^depth fits the node budget."""
    depth = _knob(depth, settings.separation_depth)
    budget = _knob(budget, settings.node_budget)
    while depth > 2 and M ** depth > budget:
        depth -= 1
    return max(2, depth)


def certify_separation(system: IfsSystem, depth: Optional[int] = None, gap_fraction: Optional[float] = None,
                       raise_on_failure: bool = True) -> SeparationCertificate:
    """Gaps between the pieces S_1 K'..S_M K', the S_0 projection gap, α_K and cone membership.

    K' gaps are certified by box enclosures in coset coordinates. S_0 K is
    separated from the other pieces through the projection onto v, which puts
    it in [0, r0 a] and the rest in [a (1 - r), a].
    """
    started = time.perf_counter()
    gap_fraction = _knob(gap_fraction, settings.gap_fraction)
    backend = system.backend
    c = backend.quasi_triangle_constant
    M = system.M
    r, r0, a = system.params.r, system.params.r0, system.coset.a
    target = gap_fraction * system.separation / c
    depth = separation_depth(M, depth)

    kmaps = kprime_maps(system)
    box_lo, box_hi = invariant_box(system.group, kmaps.translations, kmaps.ratios,
                                   np.vstack([kmaps.fixed_point([i]) for i in range(M)]))
    levels = box_levels(system.group, kmaps.translations, kmaps.ratios, box_lo, box_hi, depth,
                        settings.node_budget)
    points = _point_levels(kmaps, kmaps.fixed_point([0]), depth)
    roots = np.array(list(itertools.combinations(range(M), 2)), dtype=int).reshape(-1, 2)
    gaps = box_tree_gaps(backend, levels, points, roots, target, M, pair_budget=settings.box_pair_budget)
    lower = np.full((M, M), np.inf)
    upper = np.full((M, M), np.inf)
    for (i, j), lo, up in zip(roots, gaps.lower, gaps.upper):
        lower[i, j] = lower[j, i] = lo
        upper[i, j] = upper[j, i] = up

    piece_gaps = []
    for i in range(M):
        j = int(np.argmin(lower[i]))
        piece_gaps.append(PieceGap(piece=i + 1, nearest=j + 1, lower=float(lower[i, j]), upper=float(upper[i, j])))
    min_gap = min((pg.lower for pg in piece_gaps), default=0.0)

    analytic = a * (1.0 - r - r0)
    s0_gap = float(backend.norm(system.group.exp_horizontal(max(analytic, 0.0) * system.coset.v)))

    pairs = roots[None, :, :] + (np.arange(M) * M)[:, None, None]
    if pairs.size // 2 > settings.box_pair_budget:
        raise DepthOverflow(
            f"{pairs.size // 2} sibling pairs exceed the pair budget {settings.box_pair_budget}",
            {"M": M, "budget": settings.box_pair_budget},
        )
    sub = box_tree_gaps(backend, levels[1:], points[1:], pairs.reshape(-1, 2), target * r, M,
                        pair_budget=settings.box_pair_budget)
    within = np.minimum(sub.lower.reshape(M, -1).min(axis=1, initial=np.inf), r * s0_gap)

    cloud_depth = max(1, int(np.floor(np.log(settings.cloud_budget) / np.log(system.family.size))))
    nodes = attractor(system, cloud_depth)
    pts = nodes.points(system.family, system.anchor)
    first = nodes.words[:, 0]
    proj = system.coset.project(pts)
    projection = ProjectionGap(
        a=a,
        s0_interval=(0.0, r0 * a),
        rest_interval=(a * (1.0 - r), a),
        analytic_gap=analytic,
        cloud_s0_max=float(np.max(proj[first == 0])) if np.any(first == 0) else 0.0,
        cloud_rest_min=float(np.min(proj[first != 0])) if np.any(first != 0) else a,
    )

    diam_k = diameter_upper_bound(system)
    kprime_rows = np.minimum(np.min(lower, axis=1), s0_gap)
    all_gaps = min(float(np.min(kprime_rows, initial=np.inf)), s0_gap)
    alpha = alpha_constants(
        letter_gaps=np.concatenate([[s0_gap], kprime_rows]),
        diam_k=diam_k,
        word_gaps=np.concatenate([[r0 * all_gaps], within]),
        word_ratios=system.ratios,
    )

    center_gaps = [float(np.min(backend.distance(system.centers[i], system.centers[i + 1:]))) for i in range(M - 1)]
    centers_ok = bool(min(center_gaps, default=np.inf) >= system.separation * (1.0 - 1e-12))
    cone_margin = system.cone.margin(pts)
    in_cone = bool(np.all(system.cone.contains(pts)))

    failures = []
    if min_gap < target:
        failures.append("inter_piece_gap")
    if not r + r0 < 1.0:
        failures.append("r0_plus_r")
    if not (projection.analytic_gap > 0 and projection.cloud_s0_max < projection.cloud_rest_min):
        failures.append("projection_gap")
    if not alpha["alpha_k"] > 0:
        failures.append("alpha_k")
    if not centers_ok:
        failures.append("center_separation")
    if not in_cone:
        failures.append("cone_membership")

    cert = SeparationCertificate(
        depth=depth,
        cloud_depth=cloud_depth,
        invariant_box=[box_lo.tolist(), box_hi.tolist()],
        backend=backend.kind,
        seed=system.seed,
        target_gap=target,
        gap_fraction=gap_fraction,
        quasi_triangle_constant=c,
        radius_bound=system.radius_bound,
        max_node_diameter=float(2.0 * c * np.max(node_radii(system, nodes))),
        piece_gaps=piece_gaps,
        min_gap_lower=float(min_gap),
        s0_gap_lower=s0_gap,
        search_exhausted=bool(gaps.exhausted or sub.exhausted),
        projection=projection,
        r_plus_r0=r + r0,
        centers_ok=centers_ok,
        cone_margin=cone_margin,
        nodes_in_cone=in_cone,
        failures=failures,
        certified=not failures,
        **alpha,
    )
    system.certificate = cert
    logger.info(
        "Checked separation",
        certified=cert.certified,
        failures=failures,
        min_gap=cert.min_gap_lower,
        target=target,
        alpha_k=cert.alpha_k,
        pairs=gaps.pairs_examined + sub.pairs_examined,
        elapsed_ms=round((time.perf_counter() - started) * 1000, 2),
    )
    if raise_on_failure and not cert.certified:
        raise CertificationFailure(
            f"separation not certified: {', '.join(failures)}",
            {"failures": failures, "min_gap_lower": cert.min_gap_lower, "target": target},
        )
    return cert


def _inclusion_word(gen: np.random.Generator, letters: int):
    """Random v = w0 0^k1 w1 0^k2 w2 with its zero-free reduction and block lengths."""
    blocks = int(gen.integers(1, 4))
    word, plain, spans = [], [], []
    for j in range(blocks):
        zeros = int(gen.integers(0, 3)) if j else 0
        block = [int(x) for x in gen.integers(1, letters + 1, size=int(gen.integers(1, 3)))]
        word += [0] * zeros + block
        plain += block
        spans.append((zeros, len(block)))
    return word, plain, spans


def neighborhood_inclusion_check(system: IfsSystem, samples: int = 1000,
                                 seed: Optional[int] = None) -> InclusionReport:
    """Displacement of S_v(p) from S_{w0 w1 ...}(p) for v = w0 0^k1 w1 0^k2 ... and p in K'.

    The radius for v is (r^l0 + r^(l0+l1) + ...) (1 + 5 C0 diam B), one term per
    nonempty zero block, times c^(blocks) for a quasi-metric.
    """
    seed = _knob(seed, system.seed)
    r = system.params.r
    c = system.backend.quasi_triangle_constant
    scale = 1.0 + 5.0 * system.params.c0 * system.ball.diameter
    fam = system.family
    worst_ratio = 0.0
    worst = 0.0
    bad = 0
    for s in range(samples):
        gen = sampling.rng(seed, "inclusion", s)
        word, plain, spans = _inclusion_word(gen, system.M)
        rho = 0.0
        prefix = 0
        for zeros, length in spans:
            if zeros:
                rho += r ** prefix
            prefix += length
        g, ratio = fam.word_map([int(x) for x in gen.integers(1, system.M + 1, size=3)])
        p = fam.apply(g, ratio, system.anchor)
        gv, rv = fam.word_map(word)
        gp, rp = fam.word_map(plain)
        disp = float(system.backend.distance(fam.apply(gv, rv, p), fam.apply(gp, rp, p)))
        bound = rho * scale * c ** len(spans)
        worst = max(worst, disp)
        if bound > 0:
            worst_ratio = max(worst_ratio, disp / bound)
        if disp > bound * (1.0 + 1e-9) + 1e-12:
            bad += 1
    geometric = 2.0 * r * scale
    report = InclusionReport(checked=samples, violations=bad, max_displacement=worst,
                             max_ratio=worst_ratio, geometric_bound=geometric, ok=bad == 0)
    logger.info("Checked neighborhood inclusion", checked=samples, violations=bad, max_displacement=worst)
    return report


# Orchestration

def build_geometry(cfg: RunConfig, seed: int):
    """Group, backend, kernel and certified constants shared by every attempt."""
    group = CarnotGroup(algebra_from_config(cfg.group))
    kernel = _try_kernel(group, cfg.metric.c_gamma)
    if cfg.metric.kind == MetricKind.GAUGE and kernel is None:
        raise NotHType(
            f"gauge metric needs an H-type group; {group.algebra.name} is not",
            {"group": group.algebra.name},
        )
    backend = MetricBackend(group, cfg.metric.kind, kernel=kernel)
    certify_quasi_triangle(backend, seed=seed)
    return group, backend, kernel


def construct_system(cfg: RunConfig, seed: Optional[int] = None) -> IfsSystem:
    """Halve epsilon until the derived system passes certification."""
    seed = _knob(_knob(seed, cfg.seed), settings.default_seed)
    knobs = cfg.construction
    eps = _knob(knobs.epsilon_start, settings.epsilon_start)
    retries = _knob(knobs.retries, settings.epsilon_retries)
    coset_samples = _knob(knobs.coset_samples, settings.coset_samples)

    group, backend, kernel = build_geometry(cfg, seed)
    c0 = estimate_c0(backend, sphere_samples=knobs.sphere_samples, seed=seed,
                     safety=_knob(knobs.safety_c0, settings.safety_c0))
    cone = choose_cone(group, backend, kernel, cfg.cone.component, cfg.cone.radius, cfg.cone.margin, seed=seed)
    direction = np.zeros(group.m)
    direction[cfg.cone.component - 1] = -1.0
    coset = VerticalCoset(group, direction, 1.0)
    ball = choose_ball(backend, cone, coset, c0, knobs.ball_radius, seed=seed)
    c1, _ = estimate_c1(backend, coset, ball, [eps, eps / 2, eps / 4], samples=coset_samples, seed=seed,
                        safety=_knob(knobs.safety_c1, settings.safety_c1))

    attempts: List[Dict[str, Any]] = []
    for attempt in range(retries):
        try:
            centers = select_centers(backend, coset, ball, eps, seed=seed, samples=coset_samples,
                                     rule=knobs.center_rule, max_centers=knobs.max_centers, cone=cone,
                                     grid=knobs.grid)
            params = derive_parameters(ball, eps, c0, c1, group.Q, len(centers),
                                       rule=knobs.radius_rule, balance=knobs.balance)
            system = IfsSystem(group=group, backend=backend, kernel=kernel, coset=coset, cone=cone,
                               ball=ball, centers=centers, params=params,
                               group_config=cfg.group.model_dump(mode="json"), seed=seed)
            certify_separation(system, gap_fraction=knobs.gap_fraction)
            attempts.append({"epsilon": eps, "M": params.M, "r": params.r, "r0": params.r0, "outcome": "certified"})
            system.attempts = attempts
            logger.info("Constructed system", epsilon=eps, M=params.M, r=params.r, r0=params.r0, attempts=attempt + 1)
            return system
        except ConstructionError as e:
            attempts.append({"epsilon": eps, "outcome": e.code, "reason": e.message, **_scalars(e.details)})
            logger.warning("Construction attempt failed", epsilon=eps, error=e.code, reason=e.message)
            eps /= 2.0
    raise CertificationFailure(
        f"no certified system after {retries} epsilon values",
        {"attempts": attempts},
    )


def _scalars(details: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in details.items() if isinstance(v, (int, float, str, bool))}

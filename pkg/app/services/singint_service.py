"""Truncated and maximal kernel transforms over the self-similar measure.

Sums run over word-tree nodes. Far nodes are summed whole once their
diameter-to-distance ratio drops below θ; near nodes are opened.
"""
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    DepthOverflow,
    InsufficientDepth,
    InvalidNesting,
    SignUncertain,
    TruncationBelowResolution,
)
from app.core.logging import get_logger
from app.models.schemas import CompopReport, LadderRow, MetricKind, SemmesReport, UnbResult
from app.services.group_service import MetricBackend
from app.services.measure_service import DiscreteMeasure, measure_at_depth, upper_density_constant
from app.services.potential_service import HTypeKernel, kernel_size_constant, kernel_smoothness_constant
from app.utils import sampling
from app.utils.reduction import deterministic_sum, parallel_computation
from app.utils.word_tree import expand_nodes, root, uniform_tree

logger = get_logger(__name__)


@dataclass
class TruncationGrid:
    """Decreasing truncation radii, floored at twice the node diameter."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or len(self.values) == 0:
            raise ValueError("truncation grid needs at least one radius")
        if np.any(self.values <= 0) or np.any(np.diff(self.values) >= 0):
            raise ValueError("truncation radii must be positive and strictly decreasing")

    @classmethod
    def log_spaced(cls, floor: float, ceiling: float, count: int) -> "TruncationGrid":
        if count == 1 or ceiling <= floor:
            return cls(np.array([floor]))
        return cls(np.geomspace(ceiling, floor, count))

    @classmethod
    def for_measure(cls, mu: DiscreteMeasure, ceiling: float, count: Optional[int] = None) -> "TruncationGrid":
        count = count or settings.grid_points
        return cls.log_spaced(2.0 * mu.max_diameter, ceiling, count)

    @property
    def floor(self) -> float:
        return float(self.values[-1])

    def check(self, mu: DiscreteMeasure) -> None:
        if self.floor < 2.0 * mu.max_diameter:
            raise TruncationBelowResolution(
                f"truncation {self.floor:.4g} is below twice the node diameter {mu.max_diameter:.4g}",
                {"eps": self.floor, "node_diameter": mu.max_diameter},
            )


def _backend_for(ker: HTypeKernel, mu: DiscreteMeasure) -> MetricBackend:
    if mu.backend is not None:
        return mu.backend
    return MetricBackend(ker.group, MetricKind.GAUGE, kernel=ker)


def _kernel_terms(ker: HTypeKernel, points: np.ndarray, weights: np.ndarray, p: np.ndarray) -> np.ndarray:
    g = ker.group
    return deterministic_sum(ker.kernel(g.multiply(g.inverse(points), p)), axis0_weights=weights)


def truncated_transform(ker: HTypeKernel, mu: DiscreteMeasure, p, eps: float) -> np.ndarray:
    """T^ε(p) = Σ weight k(node^-1 . p) over nodes farther than eps from p.

    Nodes whose cylinder straddles the ε-sphere are opened one level and their
    children are classified by distance.
    """
    p = np.asarray(p, dtype=float)
    if eps < 2.0 * mu.max_diameter:
        raise TruncationBelowResolution(
            f"truncation {eps:.4g} is below twice the node diameter {mu.max_diameter:.4g}",
            {"eps": eps, "node_diameter": mu.max_diameter},
        )
    backend = _backend_for(ker, mu)
    c = backend.quasi_triangle_constant
    d = backend.distance(mu.points, p)
    keep = d > eps
    straddle = np.abs(d - eps) <= c * mu.radii
    total = np.zeros(ker.m)
    whole = keep & ~straddle
    if np.any(whole):
        total = total + _kernel_terms(ker, mu.points[whole], mu.weights[whole], p)
    if np.any(straddle) and mu.nodes is not None:
        fam = mu.family
        g, rho = fam.children(mu.nodes.translations[straddle], mu.nodes.ratios[straddle])
        pts = fam.apply(g, rho, mu.anchor)
        w = rho ** mu.dimension
        inside = backend.distance(pts, p) > eps
        if np.any(inside):
            total = total + _kernel_terms(ker, pts[inside], w[inside], p)
    elif np.any(straddle & keep):
        sel = straddle & keep
        total = total + _kernel_terms(ker, mu.points[sel], mu.weights[sel], p)
    return total


def maximal_transform(ker: HTypeKernel, mu: DiscreteMeasure, p, grid: TruncationGrid) -> float:
    """max over the grid of |T^ε(p)|."""
    return float(max(np.linalg.norm(truncated_transform(ker, mu, p, eps)) for eps in grid.values))


def full_transform(ker: HTypeKernel, mu: DiscreteMeasure, p) -> np.ndarray:
    """Untruncated Σ weight k(node^-1 . p) for probes off the node set."""
    return _kernel_terms(ker, mu.points, mu.weights, np.asarray(p, dtype=float))


# Tree-accelerated quadrature of the non-vanishing integral

def cloud_barycenter(system, depth: int = 3) -> np.ndarray:
    """Weighted barycenter x_c of a small uniform cloud; internal nodes sit at S_w(x_c)."""
    depth = max(1, min(depth, int(np.floor(np.log(2048) / np.log(system.family.size)))))
    nodes = uniform_tree(system.family, depth, settings.node_budget)
    w = nodes.weights(system.group.Q - 1)
    return (w @ nodes.points(system.family, system.anchor)) / w.sum()


def unb_condition(ker: HTypeKernel, system, component: int, word: Sequence[int] = (0,), depth: int = 5,
                  theta: Optional[float] = None, smooth: Optional[float] = None, size: Optional[float] = None,
                  strict: bool = False) -> UnbResult:
    """∫_{K \\ S_w K} k_i(x^-1 . y) dμ(y) with x the fixed point of S_w.

    Nodes are accepted whole when 2 c ρ_w R / d < θ, or at the leaf depth.
    A node reaches at most s = c ρ_w (R + d(x̄, x_c)) from its representative
    S_w(x_c); it adds Ĉ_smooth s d^-Q weight to the error bar, or
    2 C_size (d - s)^(1-Q) weight when s > d / 2.
    """
    started = time.perf_counter()
    theta = settings.barnes_hut_theta if theta is None else theta
    word = tuple(int(x) for x in word)
    if depth <= len(word):
        raise InsufficientDepth(
            f"depth {depth} does not resolve the cylinder {list(word)}",
            {"depth": depth, "word": list(word)},
        )
    smooth = kernel_smoothness_constant(ker, seed=system.seed) if smooth is None else smooth
    size = kernel_size_constant(ker, seed=system.seed) if size is None else size
    fam = system.family
    backend = system.backend
    c = backend.quasi_triangle_constant
    g = system.group
    i = component - 1
    exponent = g.Q - 1
    x = fam.fixed_point(word)
    x_inv = g.inverse(x)
    x_c = cloud_barycenter(system)
    lift = float(backend.distance(system.anchor, x_c))

    values: List[np.ndarray] = []
    errors: List[np.ndarray] = []
    accepted = 0
    frontier = expand_nodes(fam, root(fam))
    while len(frontier):
        inside = frontier.with_prefix(word)
        frontier = frontier.subset(~inside)
        if not len(frontier):
            break
        coarse = frontier.proper_prefixes_of(word)
        reps = fam.apply(frontier.translations, frontier.ratios, x_c)
        d = backend.distance(x, reps)
        diam = 2.0 * c * frontier.ratios * system.radius_bound
        leaf = frontier.lengths >= depth
        take = ~coarse & ((diam < theta * d) | leaf)
        if np.any(take):
            weight = frontier.ratios[take] ** exponent
            dt = d[take]
            mt = c * frontier.ratios[take] * (system.radius_bound + lift)
            values.append(weight * ker.kernel(g.multiply(x_inv, reps[take]))[:, i])
            near = mt > 0.5 * dt
            safe = np.where(near, np.maximum(dt - mt, 0.0), dt)
            with np.errstate(divide="ignore"):
                bound = np.where(
                    near,
                    np.where(safe > 0, 2.0 * size * safe ** (1 - g.Q), np.inf),
                    smooth * mt * dt ** (-g.Q),
                )
            errors.append(weight * bound)
            accepted += int(np.sum(take))
        rest = frontier.subset(~take)
        if len(rest) * fam.size > settings.node_budget:
            raise DepthOverflow(
                f"tree quadrature exceeds the node budget {settings.node_budget}",
                {"depth": depth, "theta": theta},
            )
        frontier = expand_nodes(fam, rest) if len(rest) else rest

    value = float(deterministic_sum(np.concatenate(values))) if values else 0.0
    error = float(deterministic_sum(np.concatenate(errors))) if errors else 0.0
    sign = int(np.sign(value)) if abs(value) > error else None
    result = UnbResult(component=component, word=list(word), depth=depth, value=value, error_bar=error,
                       certified_sign=sign, nodes=accepted)
    logger.info("Evaluated non-vanishing integral", component=component, word=list(word), depth=depth,
                value=value, error_bar=error, certified_sign=sign, nodes=accepted,
                elapsed_ms=round((time.perf_counter() - started) * 1000, 2))
    if strict and sign is None:
        raise SignUncertain(
            f"error bar {error:.3g} straddles zero around {value:.3g}",
            {"value": value, "error_bar": error, "depth": depth},
        )
    return result


def depth_ladder(ker: HTypeKernel, system, component: int, word: Sequence[int], depths: Sequence[int],
                 theta: Optional[float] = None) -> List[LadderRow]:
    """unb_condition across depths with successive differences and their ratios."""
    smooth = kernel_smoothness_constant(ker, seed=system.seed)
    size = kernel_size_constant(ker, seed=system.seed)
    rows: List[LadderRow] = []
    for depth in depths:
        res = unb_condition(ker, system, component, word, depth, theta=theta, smooth=smooth, size=size)
        diff = res.value - rows[-1].value if rows else None
        ratio = None
        if diff is not None and rows[-1].difference not in (None, 0.0):
            ratio = abs(diff) / abs(rows[-1].difference)
        rows.append(LadderRow(depth=depth, value=res.value, error_bar=res.error_bar, difference=diff, ratio=ratio))
    return rows


def scale_invariance_residual(ker: HTypeKernel, system, depth: int, z=None) -> float:
    """Relative gap between the S_0-cylinder sum at S_0(z) and the full sum at z one level up.

    k is (1-Q)-homogeneous, so the two coincide exactly at finite depth.
    """
    if depth < 2:
        raise InsufficientDepth("scale invariance needs depth >= 2", {"depth": depth})
    g = system.group
    if z is None:
        e = np.zeros(g.m)
        e[system.cone.component] = 1.0
        z = g.exp_horizontal(e)
    z = np.asarray(z, dtype=float)
    fam = system.family
    coarse = measure_at_depth(system, depth - 1)
    fine = measure_at_depth(system, depth)
    cylinder = fine.nodes.with_prefix([0])
    s0z = fam.apply(fam.translations[0], fam.ratios[0], z)
    lhs = _kernel_terms(ker, fine.points[cylinder], fine.weights[cylinder], s0z)
    rhs = full_transform(ker, coarse, z)
    residual = float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300))
    logger.info("Checked S_0 scale invariance", depth=depth, residual=residual)
    return residual


# Empirical constants

def _offsets(backend: MetricBackend, n: int, lengths: np.ndarray, seed: int, label: str) -> np.ndarray:
    g = backend.group
    w = sampling.chunked_normal(seed, label, n, g.N)
    nw = backend.norm(w)
    nw[nw == 0] = 1.0
    return g.scale(lengths / nw, w)


def semmes_gap(ker: HTypeKernel, mu: DiscreteMeasure, far_samples: int, near_samples: int,
               grid: TruncationGrid, seed: Optional[int] = None, workers: Optional[int] = None,
               diameter: Optional[float] = None) -> SemmesReport:
    """T* against the floor-truncated |T| over probes near and far from the support."""
    started = time.perf_counter()
    seed = settings.default_seed if seed is None else seed
    workers = settings.workers if workers is None else workers
    grid.check(mu)
    backend = _backend_for(ker, mu)
    g = ker.group
    floor = grid.floor
    span = float(grid.values[0]) if diameter is None else diameter
    gen = sampling.rng(seed, "semmes-probes")

    near_idx = gen.choice(len(mu), size=near_samples, replace=len(mu) < near_samples)
    near = g.multiply(mu.points[near_idx],
                      _offsets(backend, near_samples, np.full(near_samples, 2.0 * floor), seed, "semmes-near"))
    far_idx = gen.choice(len(mu), size=far_samples, replace=True)
    lengths = span * (1.5 + 1.5 * sampling.chunked_uniform(seed, "semmes-far-r", far_samples, 1)[:, 0])
    far = g.multiply(mu.points[far_idx], _offsets(backend, far_samples, lengths, seed, "semmes-far"))
    probes = np.vstack([near, far])
    kinds = np.concatenate([np.zeros(near_samples), np.ones(far_samples)])
    clear = np.array([float(np.min(backend.distance(q, mu.points))) for q in probes]) > floor
    probes, kinds = probes[clear], kinds[clear]

    def evaluate(q):
        return maximal_transform(ker, mu, q, grid), float(np.linalg.norm(truncated_transform(ker, mu, q, floor)))

    pairs = parallel_computation(evaluate, list(probes), workers)
    t_star = np.array([a for a, _ in pairs])
    t_floor = np.array([b for _, b in pairs])
    rows = [
        {"kind": float(k), "t_star": float(a), "t_floor": float(b)}
        for k, a, b in zip(kinds, t_star, t_floor)
    ]
    upper = None
    if len(mu) > 1:
        upper = upper_density_constant(mu, backend, seed=seed)
    report = SemmesReport(
        depth=mu.depth,
        grid=[float(v) for v in grid.values],
        t_star_max=float(t_star.max(initial=0.0)),
        t_floor_max=float(t_floor.max(initial=0.0)),
        gap=float(t_star.max(initial=0.0) - t_floor.max(initial=0.0)),
        upper_density=upper,
        rows=rows,
    )
    logger.info("Measured maximal transform gap", depth=mu.depth, probes=len(probes), gap=report.gap,
                elapsed_ms=round((time.perf_counter() - started) * 1000, 2))
    return report


def compop_check(ker: HTypeKernel, system, mu: DiscreteMeasure, outer: Sequence[int], inner: Sequence[int],
                 component: int, probes: int, seed: Optional[int] = None) -> CompopReport:
    """Left side over S_w K \\ S_v K against the annulus 2 diam S_v K < d <= 2 diam S_w K.

    Probes sit within (α_K / 2) diam S_v K of the inner cylinder.
    """
    from app.services.ifs_service import certify_separation, diameter_upper_bound

    outer = tuple(int(x) for x in outer)
    inner = tuple(int(x) for x in inner)
    if inner[: len(outer)] != outer:
        raise InvalidNesting(
            f"cylinder {list(inner)} is not inside {list(outer)}",
            {"outer": list(outer), "inner": list(inner)},
        )
    if mu.nodes is None or mu.depth <= len(inner):
        raise InvalidNesting(
            f"measure depth {mu.depth} does not resolve the cylinder {list(inner)}",
            {"depth": mu.depth, "inner": list(inner)},
        )
    seed = system.seed if seed is None else seed
    cert = system.certificate or certify_separation(system, raise_on_failure=False)
    g = system.group
    i = component - 1
    fam = system.family
    diam_k = diameter_upper_bound(system)
    diam_w = fam.word_map(outer)[1] * diam_k
    diam_v = fam.word_map(inner)[1] * diam_k

    in_w = mu.nodes.with_prefix(outer)
    in_v = mu.nodes.with_prefix(inner)
    shell = in_w & ~in_v
    anchors = np.flatnonzero(in_v)
    gen = sampling.rng(seed, "compop")
    picks = anchors[gen.integers(0, len(anchors), size=probes)]
    reach = 0.5 * cert.alpha_k * diam_v * sampling.chunked_uniform(seed, "compop-r", probes, 1)[:, 0]
    pts = g.multiply(mu.points[picks], _offsets(system.backend, probes, reach, seed, "compop-dir"))

    rows = []
    for p in pts:
        d = system.backend.distance(p, mu.points)
        values = ker.kernel(g.multiply(g.inverse(p), mu.points))[:, i] * mu.weights
        annulus = (d > 2.0 * diam_v) & (d <= 2.0 * diam_w)
        left = abs(float(deterministic_sum(values[shell]))) if np.any(shell) else 0.0
        ring = abs(float(deterministic_sum(values[annulus]))) if np.any(annulus) else 0.0
        rows.append({"left": left, "annulus": ring, "excess": left - ring})
    report = CompopReport(
        outer_word=list(outer),
        inner_word=list(inner),
        alpha_k=cert.alpha_k,
        left_max=max((r["left"] for r in rows), default=0.0),
        annulus_max=max((r["annulus"] for r in rows), default=0.0),
        a_k=max((r["excess"] for r in rows), default=0.0),
        rows=rows,
    )
    logger.info("Compared cylinder and annulus integrals", outer=list(outer), inner=list(inner), a_k=report.a_k)
    return report

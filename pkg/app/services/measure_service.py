import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import bisect
from scipy.stats import linregress

from app.core.config import settings
from app.core.exceptions import InsufficientDepth
from app.core.logging import get_logger
from app.models.schemas import ADScanReport
from app.utils import sampling
from app.utils.reduction import deterministic_sum, parallel_computation
from app.utils.word_tree import SimilarityFamily, WordNodes, cloud_diameter, split_nodes

logger = get_logger(__name__)


@dataclass
class DiscreteMeasure:
    """Weighted atoms at node representatives; weights are ratio^(Q-1) products.

    `radii` bounds how far the cylinder of each node reaches from its atom.
    """
    points: np.ndarray
    weights: np.ndarray
    dimension: float
    radii: np.ndarray
    backend: object = None
    nodes: Optional[WordNodes] = None
    family: Optional[SimilarityFamily] = None
    anchor: Optional[np.ndarray] = None
    radius_bound: float = 0.0
    depth: int = 0
    separation: Optional[float] = None

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(deterministic_sum(self.weights))

    @property
    def max_diameter(self) -> float:
        c = getattr(self.backend, "quasi_triangle_constant", 1.0)
        return float(2.0 * c * np.max(self.radii, initial=0.0))


@dataclass(frozen=True)
class Integral:
    value: Union[float, np.ndarray]
    error: float


def cylinder_weight(system, word: Sequence[int]) -> float:
    ratios = system.family.ratios
    exponent = system.group.Q - 1
    return float(np.prod([ratios[letter] ** exponent for letter in word]))


def from_tree(system, nodes: WordNodes) -> DiscreteMeasure:
    """Measure on uniform or adaptive leaves of the system's word tree."""
    cert = system.certificate
    return DiscreteMeasure(
        points=nodes.points(system.family, system.anchor),
        weights=nodes.weights(system.group.Q - 1),
        dimension=float(system.group.Q - 1),
        radii=nodes.ratios * system.radius_bound,
        backend=system.backend,
        nodes=nodes,
        family=system.family,
        anchor=system.anchor,
        radius_bound=system.radius_bound,
        depth=int(nodes.lengths.max(initial=0)),
        separation=cert.min_gap_lower if cert is not None else None,
    )


def measure_at_depth(system, depth: int) -> DiscreteMeasure:
    from app.services.ifs_service import attractor

    return from_tree(system, attractor(system, depth))


def atom(point, dimension: float, backend, weight: float = 1.0) -> DiscreteMeasure:
    point = np.atleast_2d(np.asarray(point, dtype=float))
    return DiscreteMeasure(points=point, weights=np.array([weight]), dimension=dimension,
                           radii=np.zeros(1), backend=backend)


def _subset(mu: DiscreteMeasure, mask: np.ndarray) -> DiscreteMeasure:
    return replace(
        mu,
        points=mu.points[mask],
        weights=mu.weights[mask],
        radii=mu.radii[mask],
        nodes=mu.nodes.subset(mask) if mu.nodes is not None else None,
    )


def restrict(mu: DiscreteMeasure, predicate: Union[Callable[[np.ndarray], np.ndarray], np.ndarray]) -> DiscreteMeasure:
    """Keep the atoms selected by a mask or by predicate(points); weights are not renormalized."""
    mask = predicate(mu.points) if callable(predicate) else predicate
    return _subset(mu, np.asarray(mask, dtype=bool))


def restrict_to_cylinder(mu: DiscreteMeasure, word: Sequence[int], inside: bool = True) -> DiscreteMeasure:
    mask = mu.nodes.with_prefix(word)
    return _subset(mu, mask if inside else ~mask)


def pushforward(mu: DiscreteMeasure, letter: int) -> DiscreteMeasure:
    """(S_letter)_# mu scaled by ratio^(Q-1): the measure of the letter's cylinder."""
    fam = mu.family
    g, rho = fam.translations[letter], fam.ratios[letter]
    nodes = mu.nodes
    tg, tr = fam.compose(g, rho, nodes.translations, nodes.ratios)
    words = np.hstack([np.full((len(nodes), 1), letter, dtype=int), nodes.words])
    moved = WordNodes(tg, tr, words, nodes.lengths + 1)
    return replace(
        mu,
        points=moved.points(fam, mu.anchor),
        weights=mu.weights * rho ** mu.dimension,
        radii=mu.radii * rho,
        nodes=moved,
        depth=mu.depth + 1,
    )


def refine(mu: DiscreteMeasure, mask: np.ndarray) -> DiscreteMeasure:
    """Split the selected atoms into their children; each child carries its share of the weight."""
    nodes = split_nodes(mu.family, mu.nodes, np.asarray(mask, dtype=bool))
    return replace(
        mu,
        points=nodes.points(mu.family, mu.anchor),
        weights=nodes.weights(mu.dimension),
        radii=nodes.ratios * mu.radius_bound,
        nodes=nodes,
        depth=int(nodes.lengths.max(initial=0)),
    )


def integrate(mu: DiscreteMeasure, f: Callable[[np.ndarray], np.ndarray], lipschitz: float = 0.0) -> Integral:
    """Σ weight f(atom); the error estimate is lipschitz times the largest node diameter."""
    values = np.asarray(f(mu.points), dtype=float)
    total = deterministic_sum(values, axis0_weights=mu.weights)
    return Integral(total if np.ndim(total) else float(total), float(lipschitz * mu.max_diameter))


def similarity_dimension(ratios: Sequence[float], tol: float = 1e-12) -> float:
    """The d with Σ ratio^d = 1."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) == 1:
        return 0.0

    def excess(d: float) -> float:
        return float(np.sum(ratios ** d) - 1.0)

    hi = 1.0
    while excess(hi) > 0:
        hi *= 2.0
    return float(bisect(excess, 0.0, hi, xtol=tol))


def ball_masses(mu: DiscreteMeasure, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """μ(B(center, ρ)) per radius; nodes straddling the sphere count one half."""
    d = mu.backend.distance(center, mu.points)
    inside = (d[None, :] + mu.radii[None, :]) <= radii[:, None]
    outside = (d[None, :] - mu.radii[None, :]) > radii[:, None]
    share = np.where(inside, 1.0, np.where(outside, 0.0, 0.5))
    return share @ mu.weights


def ad_regularity_scan(mu: DiscreteMeasure, backend=None, n_centers: Optional[int] = None,
                       n_radii: Optional[int] = None, seed: Optional[int] = None,
                       diameter: Optional[float] = None, workers: Optional[int] = None,
                       strict: bool = False) -> ADScanReport:
    """Two-sided bounds of μ(B(z, ρ)) / ρ^(Q-1) over atoms z and log-spaced ρ."""
    started = time.perf_counter()
    if backend is not None:
        mu = replace(mu, backend=backend)
    n_centers = n_centers or settings.ad_centers
    n_radii = n_radii or settings.ad_radii
    seed = settings.default_seed if seed is None else seed
    workers = settings.workers if workers is None else workers

    if diameter is None:
        sample = mu.points[sampling.rng(seed, "ad-diameter").permutation(len(mu))[:1024]]
        diameter = cloud_diameter(mu.backend, sample)
    lo = 5.0 * mu.max_diameter
    if len(mu) < 2 or diameter <= 0 or lo >= diameter:
        logger.warning("AD scan has no admissible radii", atoms=len(mu), floor=lo, diameter=diameter)
        if strict:
            raise InsufficientDepth(
                "the node diameter is too large for an AD scan",
                {"floor": lo, "diameter": diameter, "depth": mu.depth},
            )
        return ADScanReport(depth=mu.depth, c_low=0.0, c_high=float("inf"), regularity_ratio=None,
                            slope=None, radii=[], insufficient_depth=True)

    radii = np.geomspace(lo, diameter, n_radii)
    picks = sampling.rng(seed, "ad-centers").choice(len(mu), size=min(n_centers, len(mu)), replace=False)
    masses = np.vstack(parallel_computation(lambda idx: ball_masses(mu, mu.points[idx], radii), list(picks), workers))
    density = masses / radii[None, :] ** mu.dimension
    c_low, c_high = float(density.min()), float(density.max())
    ok = masses > 0
    fit = linregress(np.log(np.broadcast_to(radii, masses.shape)[ok]), np.log(masses[ok]))
    insufficient = c_low <= 0
    if insufficient and strict:
        raise InsufficientDepth("a scanned ball carries no mass", {"depth": mu.depth})
    report = ADScanReport(
        depth=mu.depth,
        c_low=c_low,
        c_high=c_high,
        regularity_ratio=c_high / c_low if c_low > 0 else None,
        slope=float(fit.slope),
        radii=[float(x) for x in radii],
        insufficient_depth=insufficient,
    )
    logger.info("Scanned AD regularity", depth=mu.depth, c_low=c_low, c_high=c_high, slope=report.slope,
                elapsed_ms=round((time.perf_counter() - started) * 1000, 2))
    return report


def upper_density_constant(mu: DiscreteMeasure, backend=None, n_centers: Optional[int] = None,
                           n_radii: Optional[int] = None, seed: Optional[int] = None) -> float:
    """A with μ(B(p, ρ)) <= A ρ^(Q-1), the upper side of the AD scan."""
    return ad_regularity_scan(mu, backend, n_centers, n_radii, seed).c_high

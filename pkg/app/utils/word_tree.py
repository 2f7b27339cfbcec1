"""Word trees over a family of similarities p -> g . δ_ρ(p).

A node is a composed map S_w = S_{w1} o ... o S_{wn}, stored as its
translation part g_w and ratio ρ_w. Children append a letter, so every
cylinder's descendants are contiguous in a uniform tree.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from app.core.exceptions import CertificationFailure, DepthOverflow
from app.core.logging import get_logger
from app.services.algebra_service import interval_bch_product

logger = get_logger(__name__)


class SimilarityFamily:
    """Letters 0..L-1 with translations T[l] and ratios ratios[l]."""

    def __init__(self, group, translations: np.ndarray, ratios: Sequence[float]):
        self.group = group
        self.translations = np.asarray(translations, dtype=float)
        self.ratios = np.asarray(ratios, dtype=float)

    @classmethod
    def from_centers(cls, group, centers: np.ndarray, r: float, r0: float) -> "SimilarityFamily":
        """S_0 = δ_r0 and S_i(p) = p_i . δ_r(p_i^-1 . p) = (p_i . δ_r(p_i^-1)) . δ_r(p)."""
        centers = np.asarray(centers, dtype=float)
        shifts = group.multiply(centers, group.scale(r, group.inverse(centers)))
        translations = np.vstack([np.zeros((1, group.N)), shifts])
        ratios = np.concatenate([[r0], np.full(len(centers), r)])
        return cls(group, translations, ratios)

    @property
    def size(self) -> int:
        return len(self.ratios)

    def apply(self, g: np.ndarray, rho, p) -> np.ndarray:
        return self.group.multiply(g, self.group.scale(rho, p))

    def compose(self, g: np.ndarray, rho, h: np.ndarray, sigma) -> Tuple[np.ndarray, np.ndarray]:
        """(g, ρ) o (h, σ) = (g . δ_ρ(h), ρσ)."""
        return self.group.multiply(g, self.group.scale(rho, h)), np.asarray(rho) * np.asarray(sigma)

    def children(self, g: np.ndarray, rho: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n = self.group.N
        gc, rc = self.compose(g[:, None, :], rho[:, None], self.translations[None, :, :], self.ratios[None, :])
        return gc.reshape(-1, n), rc.reshape(-1)

    def word_map(self, word: Sequence[int]) -> Tuple[np.ndarray, float]:
        g = np.zeros(self.group.N)
        rho = 1.0
        for letter in word:
            g, rho = self.compose(g, rho, self.translations[letter], self.ratios[letter])
        return g, float(rho)

    def fixed_point(self, word: Sequence[int], tol: float = 1e-15, max_iter: int = 10_000) -> np.ndarray:
        """Fixed point of S_w by iterating the contraction from the origin."""
        g, rho = self.word_map(word)
        p = np.zeros(self.group.N)
        if rho == 0 or len(word) == 0:
            return p
        for _ in range(max_iter):
            nxt = self.apply(g, rho, p)
            if np.max(np.abs(nxt - p)) <= tol * (1.0 + np.max(np.abs(p))):
                return nxt
            p = nxt
        return p


@dataclass
class WordNodes:
    """Prefix-free set of words with their composed maps."""
    translations: np.ndarray
    ratios: np.ndarray
    words: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.ratios)

    def word(self, idx: int) -> Tuple[int, ...]:
        return tuple(int(x) for x in self.words[idx, : self.lengths[idx]])

    def points(self, family: SimilarityFamily, anchor: np.ndarray) -> np.ndarray:
        return family.apply(self.translations, self.ratios, anchor)

    def weights(self, exponent: float) -> np.ndarray:
        return self.ratios ** exponent

    def with_prefix(self, prefix: Sequence[int]) -> np.ndarray:
        """Boolean mask of nodes whose word starts with prefix."""
        prefix = tuple(prefix)
        k = len(prefix)
        if k == 0:
            return np.ones(len(self), dtype=bool)
        if self.words.shape[1] < k:
            return np.zeros(len(self), dtype=bool)
        return (self.lengths >= k) & np.all(self.words[:, :k] == np.asarray(prefix), axis=1)

    def proper_prefixes_of(self, word: Sequence[int]) -> np.ndarray:
        """Boolean mask of nodes strictly coarser than the cylinder of `word`."""
        word = tuple(word)
        out = np.zeros(len(self), dtype=bool)
        for idx in np.flatnonzero(self.lengths < len(word)):
            out[idx] = self.word(idx) == word[: self.lengths[idx]]
        return out

    def subset(self, mask: np.ndarray) -> "WordNodes":
        return WordNodes(self.translations[mask], self.ratios[mask], self.words[mask], self.lengths[mask])


def root(family: SimilarityFamily) -> WordNodes:
    return WordNodes(
        translations=np.zeros((1, family.group.N)),
        ratios=np.ones(1),
        words=np.zeros((1, 0), dtype=int),
        lengths=np.zeros(1, dtype=int),
    )


def expand_nodes(family: SimilarityFamily, nodes: WordNodes) -> WordNodes:
    """Children of every node, parent order kept."""
    letters = family.size
    g, rho = family.children(nodes.translations, nodes.ratios)
    width = max(nodes.words.shape[1], int(nodes.lengths.max(initial=0)) + 1)
    words = np.full((len(nodes), width), -1, dtype=int)
    words[:, : nodes.words.shape[1]] = nodes.words
    words = np.repeat(words, letters, axis=0)
    lengths = np.repeat(nodes.lengths, letters)
    words[np.arange(len(words)), lengths] = np.tile(np.arange(letters), len(nodes))
    return WordNodes(g, rho, words, lengths + 1)


def uniform_tree(family: SimilarityFamily, depth: int, budget: int) -> WordNodes:
    """All words of length `depth`, in lexicographic order."""
    count = family.size ** depth
    if count > budget:
        raise DepthOverflow(
            f"{count} words at depth {depth} exceed the node budget {budget}",
            {"depth": depth, "letters": family.size, "budget": budget},
        )
    nodes = root(family)
    for _ in range(depth):
        nodes = expand_nodes(family, nodes)
    return nodes


def split_nodes(family: SimilarityFamily, nodes: WordNodes, mask: np.ndarray) -> WordNodes:
    """Replace the selected nodes by their children, keeping lexicographic order."""
    if not np.any(mask):
        return nodes
    return _merge_sorted([nodes.subset(~mask), expand_nodes(family, nodes.subset(mask))])


def _merge_sorted(parts: List[WordNodes]) -> WordNodes:
    width = max((p.words.shape[1] for p in parts), default=0)
    padded = []
    for p in parts:
        w = np.full((len(p), width), -1, dtype=int)
        w[:, : p.words.shape[1]] = p.words
        padded.append(w)
    words = np.vstack(padded) if padded else np.zeros((0, width), dtype=int)
    merged = WordNodes(
        translations=np.vstack([p.translations for p in parts]),
        ratios=np.concatenate([p.ratios for p in parts]),
        words=words,
        lengths=np.concatenate([p.lengths for p in parts]),
    )
    order = np.lexsort(merged.words.T[::-1]) if width else np.arange(len(merged))
    return merged.subset(order)


@dataclass
class GapBounds:
    lower: np.ndarray
    upper: np.ndarray
    rounds: int
    pairs_examined: int
    exhausted: bool


def cloud_diameter(backend, points: np.ndarray) -> float:
    best = 0.0
    for i in range(len(points) - 1):
        best = max(best, float(np.max(backend.distance(points[i], points[i + 1:]))))
    return best


# Box enclosures
#
# A box is a pair (lo, hi) of coordinate bounds. Images of a box under
# u -> T . δ_ρ(u) are enclosed by interval evaluation of the group law, so
# a gap between two boxes bounds the gap between everything they contain.

def box_image(group, translations: np.ndarray, ratios: np.ndarray,
              lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Boxes of every letter applied to every input box, letter-major, shape (L*K, N)."""
    t = np.asarray(translations, dtype=float)
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    f = np.asarray(ratios, dtype=float)[:, None, None] ** group.degrees
    blo, bhi = interval_bch_product(t[:, None, :], t[:, None, :], lo[None] * f, hi[None] * f, group.algebra)
    return blo.reshape(-1, group.N), bhi.reshape(-1, group.N)


def invariant_box(group, translations: np.ndarray, ratios: np.ndarray, seeds: np.ndarray,
                  max_iter: int = 10_000, pad: float = 1e-10) -> Tuple[np.ndarray, np.ndarray]:
    """Padded hull iteration from the seed points until every image lies in the box."""
    seeds = np.atleast_2d(seeds)
    lo, hi = seeds.min(axis=0), seeds.max(axis=0)
    for it in range(max_iter):
        ilo, ihi = box_image(group, translations, ratios, lo, hi)
        if np.all(ilo >= lo) and np.all(ihi <= hi):
            logger.debug("Found invariant box", iterations=it, width=(hi - lo).tolist())
            return lo, hi
        lo, hi = np.minimum(lo, ilo.min(axis=0)), np.maximum(hi, ihi.max(axis=0))
        eta = pad * (hi - lo) + 1e-14
        lo, hi = lo - eta, hi + eta
    raise CertificationFailure(
        f"no invariant box after {max_iter} hull iterations",
        {"failed": "invariant_box", "width": (hi - lo).tolist()},
    )


def box_levels(group, translations: np.ndarray, ratios: np.ndarray, lo: np.ndarray, hi: np.ndarray,
               depth: int, budget: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Boxes of all words of length 1..depth; index l * L^(k-1) + rest is the word l.rest."""
    letters = len(ratios)
    if letters ** depth > budget:
        raise DepthOverflow(
            f"{letters ** depth} boxes at depth {depth} exceed the node budget {budget}",
            {"depth": depth, "letters": letters, "budget": budget},
        )
    levels = []
    blo, bhi = np.atleast_2d(lo), np.atleast_2d(hi)
    for _ in range(depth):
        blo, bhi = box_image(group, translations, ratios, blo, bhi)
        levels.append((blo, bhi))
    return levels


def box_norm_lower(backend, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Lower bound of the backend norm over a box, from the smallest |coordinate| in each layer."""
    low = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
    witness = np.zeros_like(low)
    for s in backend.group.layer_slices:
        witness[..., s.start] = np.linalg.norm(low[..., s], axis=-1)
    return backend.norm(witness)


def box_distance_lower(backend, alo, ahi, blo, bhi) -> np.ndarray:
    """Lower bound of d(y, z) = ||y^-1 z|| for y in box A and z in box B."""
    dlo, dhi = interval_bch_product(-np.asarray(ahi), -np.asarray(alo), blo, bhi, backend.group.algebra)
    return box_norm_lower(backend, dlo, dhi)


def box_tree_gaps(backend, levels: List[Tuple[np.ndarray, np.ndarray]], points: List[np.ndarray],
                  roots, target: float, letters: int, pair_budget: int = 2_000_000) -> GapBounds:
    """Certified lower and sampled upper bounds on the gap between each root pair of cylinders.

    A pair of cylinders whose boxes are `target` apart is settled; others are
    replaced by all pairs of their children until the deepest level. The lower
    bound of a root is the smallest bound over the pairs that partition it.
    """
    roots = np.asarray(roots, dtype=int).reshape(-1, 2)
    n_roots = len(roots)
    ia, ib = roots[:, 0].copy(), roots[:, 1].copy()
    owner = np.arange(n_roots)
    lower = np.full(n_roots, np.inf)
    upper = np.full(n_roots, np.inf)
    examined = 0
    rounds = 0
    exhausted = False
    kids = np.arange(letters)
    for level, (lo, hi) in enumerate(levels):
        rounds += 1
        examined += len(owner)
        lb = box_distance_lower(backend, lo[ia], hi[ia], lo[ib], hi[ib])
        np.minimum.at(upper, owner, backend.distance(points[level][ia], points[level][ib]))
        last = level == len(levels) - 1
        open_ = lb < target
        if not last and int(np.sum(open_)) * letters * letters > pair_budget:
            exhausted = True
            last = True
        settle = ~open_ | last
        np.minimum.at(lower, owner[settle], lb[settle])
        if last or not np.any(open_):
            break
        ia = (ia[open_, None, None] * letters + kids[None, :, None]).repeat(letters, axis=2).reshape(-1)
        ib = (ib[open_, None, None] * letters + kids[None, None, :]).repeat(letters, axis=1).reshape(-1)
        owner = np.repeat(owner[open_], letters * letters)
    lower = np.minimum(lower, upper)
    logger.debug("Box-tree gap search finished", roots=n_roots, rounds=rounds, pairs=examined, exhausted=exhausted)
    return GapBounds(lower=lower, upper=upper, rounds=rounds, pairs_examined=examined, exhausted=exhausted)

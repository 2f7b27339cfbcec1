import itertools
import time
from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import sympy

from app.core.exceptions import (
    AlgebraError,
    AntisymmetryViolation,
    DimensionMismatch,
    GradingViolation,
    JacobiViolation,
    StratificationFailure,
    UnsupportedStep,
)
from app.core.logging import get_logger
from app.models.schemas import AlgebraSummary, GroupConfig, GroupPreset

logger = get_logger(__name__)

MAX_STEP = 6

# (var index, exponent) pairs
Factors = Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class Monomial:
    """coef * prod a_i^e * prod b_j^f, contributing to one output coordinate."""
    coef: float
    exact: Fraction
    a: Factors
    b: Factors


@dataclass(frozen=True)
class StratifiedAlgebra:
    """Validated graded nilpotent Lie algebra with its pre-expanded BCH polynomial."""
    name: str
    layer_dims: Tuple[int, ...]
    structure_constants: Dict[Tuple[int, int, int], Fraction]
    bch_terms: Tuple[Tuple[Monomial, ...], ...] = field(repr=False)
    frame_terms: Tuple[Tuple[Tuple[Monomial, ...], ...], ...] = field(repr=False)

    @property
    def step(self) -> int:
        return len(self.layer_dims)

    @property
    def total_dim(self) -> int:
        return sum(self.layer_dims)

    @property
    def horizontal_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.repeat(np.arange(1, self.step + 1), self.layer_dims)

    @property
    def layer_slices(self) -> List[slice]:
        out, start = [], 0
        for d in self.layer_dims:
            out.append(slice(start, start + d))
            start += d
        return out

    @property
    def dense_constants(self) -> np.ndarray:
        n = self.total_dim
        c = np.zeros((n, n, n))
        for (i, j, k), v in self.structure_constants.items():
            c[i, j, k] = float(v)
        return c

    @property
    def term_count(self) -> int:
        return sum(len(t) for t in self.bch_terms)

    def summary(self) -> AlgebraSummary:
        return AlgebraSummary(
            preset=self.name,
            layer_dims=list(self.layer_dims),
            step=self.step,
            total_dim=self.total_dim,
            horizontal_dim=self.horizontal_dim,
            homogeneous_dimension=int(sum((i + 1) * d for i, d in enumerate(self.layer_dims))),
            bch_terms=self.term_count,
        )


# Exact validation

def _degree_of(layer_dims: Sequence[int]) -> List[int]:
    return [d for d, size in enumerate(layer_dims, start=1) for _ in range(size)]


def _build_table(layer_dims: Sequence[int], entries) -> Dict[Tuple[int, int, int], Fraction]:
    """Full antisymmetric table from 1-based (i, j, k, num, den) entries."""
    n = sum(layer_dims)
    listed: Dict[Tuple[int, int, int], Fraction] = {}
    for line, (i, j, k, num, den) in enumerate(entries, start=1):
        if not (1 <= i <= n and 1 <= j <= n and 1 <= k <= n):
            raise DimensionMismatch(
                f"bracket entry {line} references a basis index outside 1..{n}",
                {"entry": line, "indices": [i, j, k], "total_dim": n},
            )
        value = Fraction(int(num), int(den))
        key = (i - 1, j - 1, k - 1)
        if key in listed and listed[key] != value:
            raise AlgebraError(
                f"bracket [e{i}, e{j}] lists component e{k} twice with different values",
                {"entry": line, "indices": [i, j, k]},
            )
        listed[key] = value

    table: Dict[Tuple[int, int, int], Fraction] = {}
    for (i, j, k), value in listed.items():
        if value == 0:
            continue
        if i == j:
            raise AntisymmetryViolation(
                f"antisymmetry violated at ({i + 1},{j + 1}): [e{i + 1}, e{i + 1}] must vanish",
                {"indices": [i + 1, j + 1], "component": k + 1},
            )
        partner = listed.get((j, i, k))
        if partner is not None and partner != -value:
            lo, hi = sorted((i + 1, j + 1))
            raise AntisymmetryViolation(
                f"antisymmetry violated at ({lo},{hi}): component e{k + 1} is {value} and {partner}",
                {"indices": [lo, hi], "component": k + 1},
            )
        table[(i, j, k)] = value
        table[(j, i, k)] = -value
    return table


def _check_grading(layer_dims, table) -> None:
    deg = _degree_of(layer_dims)
    step = len(layer_dims)
    for (i, j, k), value in sorted(table.items()):
        if deg[i] + deg[j] > step or deg[i] + deg[j] != deg[k]:
            raise GradingViolation(
                f"[e{i + 1}, e{j + 1}] has a component along e{k + 1} of degree {deg[k]}, "
                f"expected degree {deg[i] + deg[j]}",
                {"indices": [i + 1, j + 1, k + 1], "degrees": [deg[i], deg[j], deg[k]]},
            )


def _basis_bracket(table_rows, u: Dict[int, Fraction], v: Dict[int, Fraction]) -> Dict[int, Fraction]:
    out: Dict[int, Fraction] = {}
    for i, ui in u.items():
        for j, vj in v.items():
            for k, c in table_rows.get((i, j), ()):
                out[k] = out.get(k, Fraction(0)) + c * ui * vj
    return {k: x for k, x in out.items() if x != 0}


def _check_jacobi(n: int, table) -> None:
    rows: Dict[Tuple[int, int], List[Tuple[int, Fraction]]] = {}
    for (i, j, k), c in table.items():
        rows.setdefault((i, j), []).append((k, c))
    e = [{i: Fraction(1)} for i in range(n)]
    for i, j, l in itertools.combinations(range(n), 3):
        total: Dict[int, Fraction] = {}
        for x, y, z in ((i, j, l), (j, l, i), (l, i, j)):
            term = _basis_bracket(rows, e[x], _basis_bracket(rows, e[y], e[z]))
            for k, c in term.items():
                total[k] = total.get(k, Fraction(0)) + c
        residue = {k: c for k, c in total.items() if c != 0}
        if residue:
            raise JacobiViolation(
                f"Jacobi identity fails on basis triple ({i + 1},{j + 1},{l + 1})",
                {"witness": [i + 1, j + 1, l + 1],
                 "residual": {str(k + 1): str(c) for k, c in sorted(residue.items())}},
            )


def _check_stratification(layer_dims, table) -> None:
    deg = _degree_of(layer_dims)
    n = len(deg)
    for d in range(2, len(layer_dims) + 1):
        layer = [k for k in range(n) if deg[k] == d]
        rows = []
        for i in (i for i in range(n) if deg[i] == 1):
            for j in (j for j in range(n) if deg[j] == d - 1):
                rows.append([sympy.Rational(table.get((i, j, k), Fraction(0)).numerator,
                                            table.get((i, j, k), Fraction(0)).denominator) for k in layer])
        rank = sympy.Matrix(rows).rank() if rows else 0
        if rank != len(layer):
            raise StratificationFailure(
                f"layer {d} is not spanned by brackets of layer 1 with layer {d - 1} "
                f"(rank {rank} of {len(layer)})",
                {"layer": d, "rank": int(rank), "dim": len(layer), "basis": [k + 1 for k in layer]},
            )


# BCH expansion

def _dynkin_coefficient(word: Tuple[int, ...]) -> Fraction:
    """Total Dynkin weight of a letter word (0 = X, 1 = Y) over all block splittings."""
    length = len(word)

    def walk(pos: int, blocks: int, denom: int) -> Fraction:
        if pos == length:
            sign = 1 if blocks % 2 == 1 else -1
            return Fraction(sign, blocks * length * denom)
        acc = Fraction(0)
        seen_y = False
        for end in range(pos + 1, length + 1):
            letter = word[end - 1]
            if letter == 1:
                seen_y = True
            elif seen_y:
                break
            block = word[pos:end]
            r = block.count(0)
            s = block.count(1)
            acc += walk(end, blocks + 1, denom * factorial(r) * factorial(s))
        return acc

    return walk(0, 0, 1)


def dynkin_table(step: int) -> Dict[Tuple[int, ...], Fraction]:
    """Nonzero right-nested word coefficients of length 2..step."""
    out = {}
    for length in range(2, step + 1):
        for word in itertools.product((0, 1), repeat=length):
            if word[-1] == word[-2]:
                continue
            c = _dynkin_coefficient(word)
            if c != 0:
                out[word] = c
    return out


def _expand_bch(layer_dims, table) -> Tuple[Tuple[Tuple[Monomial, ...], ...], Tuple]:
    n = sum(layer_dims)
    step = len(layer_dims)
    a = sympy.symbols(f"a0:{n}")
    b = sympy.symbols(f"b0:{n}")
    entries = [(i, j, k, sympy.Rational(c.numerator, c.denominator)) for (i, j, k), c in table.items()]

    def sym_bracket(u, v):
        out = [sympy.Integer(0)] * n
        for i, j, k, c in entries:
            if u[i] != 0 and v[j] != 0:
                out[k] += c * u[i] * v[j]
        return out

    series = [sympy.Integer(0)] * n
    for word, coef in dynkin_table(step).items():
        letters = [a if w == 0 else b for w in word]
        val = list(letters[-1])
        for vec in reversed(letters[:-1]):
            val = sym_bracket(vec, val)
        c = sympy.Rational(coef.numerator, coef.denominator)
        series = [s + c * x for s, x in zip(series, val)]

    gens = list(a) + list(b)
    terms: List[Tuple[Monomial, ...]] = []
    frame: List[List[List[Monomial]]] = [[[] for _ in range(n)] for _ in range(layer_dims[0])]
    for k in range(n):
        expr = sympy.expand(series[k])
        monos = []
        if expr != 0:
            for exps, c in sympy.Poly(expr, *gens).terms():
                fa = tuple((i, e) for i, e in enumerate(exps[:n]) if e)
                fb = tuple((i, e) for i, e in enumerate(exps[n:]) if e)
                exact = Fraction(int(c.p), int(c.q))
                mono = Monomial(coef=float(exact), exact=exact, a=fa, b=fb)
                monos.append(mono)
                if len(fb) == 1 and fb[0][1] == 1 and fb[0][0] < layer_dims[0]:
                    frame[fb[0][0]][k].append(Monomial(coef=mono.coef, exact=exact, a=fa, b=()))
        terms.append(tuple(monos))
    frozen_frame = tuple(tuple(tuple(col) for col in row) for row in frame)
    return tuple(terms), frozen_frame


def validate_algebra(layer_dims: Sequence[int], entries, name: str = "inline") -> StratifiedAlgebra:
    """Validate a raw structure-constant table and pre-expand its group law."""
    started = time.perf_counter()
    layer_dims = tuple(int(d) for d in layer_dims)
    if not layer_dims or any(d < 1 for d in layer_dims):
        raise DimensionMismatch("layer dimensions must be positive", {"layer_dims": list(layer_dims)})
    if len(layer_dims) > MAX_STEP:
        raise UnsupportedStep(
            f"step {len(layer_dims)} exceeds the supported maximum {MAX_STEP}",
            {"step": len(layer_dims)},
        )
    table = _build_table(layer_dims, entries)
    _check_grading(layer_dims, table)
    _check_jacobi(sum(layer_dims), table)
    _check_stratification(layer_dims, table)
    terms, frame = _expand_bch(layer_dims, table)
    alg = StratifiedAlgebra(
        name=name, layer_dims=layer_dims, structure_constants=table,
        bch_terms=terms, frame_terms=frame,
    )
    logger.info(
        "Validated algebra",
        name=name,
        layer_dims=list(layer_dims),
        bch_terms=alg.term_count,
        elapsed_ms=round((time.perf_counter() - started) * 1000, 2),
    )
    return alg


# Presets

def _quaternion_units() -> List[np.ndarray]:
    """Left multiplication by i, j, k on R^4 with basis (1, i, j, k)."""
    images = {
        "i": [(1, 1), (0, -1), (3, 1), (2, -1)],
        "j": [(2, 1), (3, -1), (0, -1), (1, 1)],
        "k": [(3, 1), (2, 1), (1, -1), (0, -1)],
    }
    mats = []
    for unit in ("i", "j", "k"):
        m = np.zeros((4, 4), dtype=int)
        for col, (row, sign) in enumerate(images[unit]):
            m[row, col] = sign
        mats.append(m)
    return mats


def heisenberg_entries(n: int) -> List[Tuple[int, int, int, int, int]]:
    """[x_i, y_i] = t on layers (2n, 1)."""
    return [(i, n + i, 2 * n + 1, 1, 1) for i in range(1, n + 1)]


def h_type_entries(center_dim: int, multiplicity: int) -> List[Tuple[int, int, int, int, int]]:
    m = 4 * multiplicity
    out = []
    for l, mat in enumerate(_quaternion_units()[:center_dim]):
        for block in range(multiplicity):
            off = 4 * block
            for r in range(4):
                for c in range(r + 1, 4):
                    if mat[r, c]:
                        out.append((off + r + 1, off + c + 1, m + l + 1, int(mat[r, c]), 1))
    return out


def algebra_from_preset(preset: GroupPreset, center_dim: int = 1, multiplicity: int = 1) -> StratifiedAlgebra:
    if preset == GroupPreset.HEISENBERG_1:
        return validate_algebra((2, 1), heisenberg_entries(1), name=preset.value)
    if preset == GroupPreset.HEISENBERG_2:
        return validate_algebra((4, 1), heisenberg_entries(2), name=preset.value)
    if preset == GroupPreset.ABELIAN_2:
        return validate_algebra((2,), [], name=preset.value)
    if preset == GroupPreset.ABELIAN_3:
        return validate_algebra((3,), [], name=preset.value)
    if preset == GroupPreset.ENGEL:
        return validate_algebra((2, 1, 1), [(1, 2, 3, 1, 1), (1, 3, 4, 1, 1)], name=preset.value)
    if preset == GroupPreset.H_TYPE:
        return validate_algebra(
            (4 * multiplicity, center_dim),
            h_type_entries(center_dim, multiplicity),
            name=f"h-type(center_dim={center_dim},multiplicity={multiplicity})",
        )
    raise AlgebraError(f"preset {preset} needs explicit layers", {"preset": str(preset)})


def algebra_from_config(cfg: GroupConfig) -> StratifiedAlgebra:
    if cfg.preset == GroupPreset.INLINE:
        return validate_algebra(cfg.layers, cfg.brackets, name="inline")
    return algebra_from_preset(cfg.preset, cfg.center_dim, cfg.multiplicity)


# Numeric evaluation

def check_dims(alg: StratifiedAlgebra, *arrays: np.ndarray) -> None:
    for x in arrays:
        if x.shape[-1] != alg.total_dim:
            raise DimensionMismatch(
                f"vector of length {x.shape[-1]} does not belong to an algebra of dimension {alg.total_dim}",
                {"got": int(x.shape[-1]), "expected": alg.total_dim},
            )


def _factor_product(factors: Factors, x: np.ndarray, shape) -> np.ndarray:
    val = np.ones(shape)
    for idx, e in factors:
        col = x[..., idx]
        val = val * (col if e == 1 else col ** e)
    return val


def bch_product(a, b, alg: StratifiedAlgebra) -> np.ndarray:
    """log(exp a . exp b), vectorized over leading axes."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    check_dims(alg, a, b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    out = np.array(np.broadcast_to(a + b, shape))
    lead = shape[:-1]
    for k, monos in enumerate(alg.bch_terms):
        if not monos:
            continue
        acc = np.zeros(lead)
        for m in monos:
            acc = acc + m.coef * (_factor_product(m.a, a, lead) * _factor_product(m.b, b, lead))
        out[..., k] = out[..., k] + acc
    return out


def _interval_power(lo: np.ndarray, hi: np.ndarray, e: int) -> Tuple[np.ndarray, np.ndarray]:
    if e == 1:
        return lo, hi
    a, b = lo ** e, hi ** e
    if e % 2:
        return a, b
    low = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(a, b))
    return low, np.maximum(a, b)


def _interval_mul(alo, ahi, blo, bhi) -> Tuple[np.ndarray, np.ndarray]:
    c = np.stack(np.broadcast_arrays(alo * blo, alo * bhi, ahi * blo, ahi * bhi))
    return c.min(axis=0), c.max(axis=0)


def _interval_factors(factors: Factors, lo: np.ndarray, hi: np.ndarray, shape) -> Tuple[np.ndarray, np.ndarray]:
    vlo, vhi = np.ones(shape), np.ones(shape)
    for idx, e in factors:
        flo, fhi = _interval_power(lo[..., idx], hi[..., idx], e)
        vlo, vhi = _interval_mul(vlo, vhi, flo, fhi)
    return vlo, vhi


def interval_bch_product(a_lo, a_hi, b_lo, b_hi, alg: StratifiedAlgebra) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinate box holding log(exp a . exp b) for all a in [a_lo, a_hi], b in [b_lo, b_hi].

    The enclosure is exact in real arithmetic; floating roundoff is not tracked.
    """
    a_lo, a_hi, b_lo, b_hi = (np.asarray(x, dtype=float) for x in (a_lo, a_hi, b_lo, b_hi))
    check_dims(alg, a_lo, a_hi, b_lo, b_hi)
    shape = np.broadcast_shapes(a_lo.shape, a_hi.shape, b_lo.shape, b_hi.shape)
    a_lo, a_hi, b_lo, b_hi = (np.broadcast_to(x, shape) for x in (a_lo, a_hi, b_lo, b_hi))
    lo = np.array(a_lo + b_lo)
    hi = np.array(a_hi + b_hi)
    lead = shape[:-1]
    for k, monos in enumerate(alg.bch_terms):
        for m in monos:
            plo, phi = _interval_factors(m.a, a_lo, a_hi, lead)
            qlo, qhi = _interval_factors(m.b, b_lo, b_hi, lead)
            tlo, thi = _interval_mul(plo, phi, qlo, qhi)
            if m.coef >= 0:
                lo[..., k] += m.coef * tlo
                hi[..., k] += m.coef * thi
            else:
                lo[..., k] += m.coef * thi
                hi[..., k] += m.coef * tlo
    return lo, hi


def bracket(a, b, alg: StratifiedAlgebra) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    check_dims(alg, a, b)
    return np.einsum("...i,...j,ijk->...k", a, b, alg.dense_constants)


def left_invariant_frame(alg: StratifiedAlgebra, points) -> np.ndarray:
    """Coefficients of X_1..X_m at the given points, shape (..., N, m)."""
    points = np.asarray(points, dtype=float)
    check_dims(alg, points)
    lead = points.shape[:-1]
    n, m = alg.total_dim, alg.horizontal_dim
    out = np.zeros(lead + (n, m))
    for i in range(m):
        out[..., i, i] = 1.0
        for k, monos in enumerate(alg.frame_terms[i]):
            for mono in monos:
                out[..., k, i] += mono.coef * _factor_product(mono.a, points, lead)
    return out


def is_step_two_closed_form(alg: StratifiedAlgebra) -> bool:
    """True when every BCH monomial is a bilinear a_i b_j term."""
    return all(
        len(m.a) == 1 and len(m.b) == 1 and m.a[0][1] == 1 and m.b[0][1] == 1
        for monos in alg.bch_terms for m in monos
    )

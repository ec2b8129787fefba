"""Distance-only computational geometry.

Everything in this module works from squared inter-node distances alone;
coordinates never enter. Generalized simplex volumes come from bordered
(Cayley-Menger) determinants, point-in-hull tests compare sub-simplex
volumes against the full volume, and barycentric coordinates are ratios
of those volumes.

All functions are pure; there is no shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

# Absolute volume tolerance, applied after rescaling the local point set to
# unit squared diameter. Below this a simplex counts as degenerate.
VOLUME_TOL = 1e-12
# Relative tolerance for the hull-inclusion volume comparison.
HULL_REL_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometry input/consistency errors."""


class AsymmetricDistanceError(GeometryError):
    def __init__(self, i, j):
        self.pair = (i, j)
        super().__init__(f"distance table asymmetric at ({i}, {j})")


class NegativeEntryError(GeometryError):
    def __init__(self, i, j):
        self.pair = (i, j)
        super().__init__(f"negative squared distance at ({i}, {j})")


class NonzeroDiagonalError(GeometryError):
    def __init__(self, i):
        self.pair = (i, i)
        super().__init__(f"nonzero diagonal entry at ({i}, {i})")


class NotRealizableError(GeometryError):
    """Squared volume significantly negative: distances not embeddable."""


class DegenerateSimplexError(GeometryError):
    """Reference simplex has (numerically) zero volume."""


class OutsideHullError(GeometryError):
    """Point lies outside the convex hull of its would-be triangulation set."""


class HullVerdict(Enum):
    INSIDE = "inside"
    BOUNDARY = "boundary"
    OUTSIDE = "outside"


@dataclass(frozen=True)
class DistanceMatrix:
    """Validated table of squared Euclidean distances over a node subset.

    ``ids[i]`` labels row/column ``i`` of ``sq_dist``. Entries are squared
    distances (length^2); the table is symmetric with a zero diagonal.
    """

    ids: tuple[int, ...]
    sq_dist: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)

    def index_of(self, node_id: int) -> int:
        try:
            return self.ids.index(node_id)
        except ValueError:
            raise KeyError(f"node {node_id} not in distance matrix") from None

    def restrict(self, ids) -> "DistanceMatrix":
        """Submatrix over ``ids``, rows/columns in the given order."""
        idx = np.array([self.index_of(i) for i in ids])
        return DistanceMatrix(tuple(ids), self.sq_dist[np.ix_(idx, idx)])

    @classmethod
    def from_points(cls, ids, coords) -> "DistanceMatrix":
        """Exact squared-distance table of a coordinate array (one row per id)."""
        pts = np.asarray(coords, dtype=float)
        diff = pts[:, None, :] - pts[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        sq = (sq + sq.T) / 2.0
        np.fill_diagonal(sq, 0.0)
        return cls(tuple(ids), sq)


@dataclass(frozen=True)
class Simplex:
    """m+1 vertices spanning an m-dimensional cell with generalized volume."""

    dim: int
    vertex_ids: tuple[int, ...]
    volume: float


@dataclass(frozen=True)
class BarycentricWeights:
    """Convex coefficients expressing one node in terms of m+1 neighbors."""

    sensor_id: int
    neighbor_ids: tuple[int, ...]
    weights: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {k: float(w) for k, w in zip(self.neighbor_ids, self.weights)}


def validate_distance_matrix(raw, ids=None) -> DistanceMatrix:
    """Validate a raw squared-distance table.

    Nothing is repaired silently: asymmetry, negative entries and nonzero
    diagonals are hard errors naming the offending index pair.
    """
    sq = np.asarray(raw, dtype=float)
    if sq.ndim != 2 or sq.shape[0] != sq.shape[1]:
        raise GeometryError(f"distance table must be square, got shape {sq.shape}")
    n = sq.shape[0]
    if ids is None:
        ids = tuple(range(n))
    else:
        ids = tuple(ids)
        if len(ids) != n:
            raise GeometryError("ids length does not match table size")
    for i in range(n):
        if sq[i, i] != 0.0:
            raise NonzeroDiagonalError(ids[i])
    bad = np.argwhere(sq != sq.T)
    if bad.size:
        i, j = bad[0]
        raise AsymmetricDistanceError(ids[i], ids[j])
    neg = np.argwhere(sq < 0.0)
    if neg.size:
        i, j = neg[0]
        raise NegativeEntryError(ids[i], ids[j])
    return DistanceMatrix(ids, sq)


def _bordered(sq: np.ndarray) -> np.ndarray:
    k = sq.shape[0]
    out = np.ones((k + 1, k + 1))
    out[0, 0] = 0.0
    out[1:, 1:] = sq
    return out


def cayley_menger_determinant(d: DistanceMatrix) -> float:
    """Determinant of the bordered squared-distance matrix of all nodes in d.

    The body is the k x k squared-distance table, bordered by a row and
    column of ones with a zero corner. Evaluated by partially pivoted LU.
    """
    if d.n < 2:
        raise GeometryError("need at least 2 nodes for a bordered determinant")
    return float(np.linalg.det(_bordered(d.sq_dist)))


def cm_coefficient(m: int) -> float:
    """Proportionality constant c(m) with c(m) * A^2 = bordered determinant.

    For m+1 points spanning dimension m: c(m) = (-1)^(m+1) * 2^m * (m!)^2,
    so c(1) = 2, c(2) = -16, c(3) = 288.
    """
    if m < 1:
        raise GeometryError("dimension must be >= 1")
    return float((-1) ** (m + 1) * 2**m * math.factorial(m) ** 2)


def _volume_from_sq(sq: np.ndarray, m: int) -> float:
    """Generalized volume of m+1 points given their squared-distance table.

    Raises NotRealizableError when the squared volume is negative beyond
    tolerance in diameter-normalized units (distances not embeddable in R^m).
    """
    scale = float(sq.max())
    if scale == 0.0:
        return 0.0
    ratio = np.linalg.det(_bordered(sq)) / cm_coefficient(m)
    norm_ratio = ratio / scale**m
    if norm_ratio < -VOLUME_TOL:
        raise NotRealizableError(
            f"squared volume {ratio:.3e} negative beyond tolerance; "
            "distances are not realizable in the requested dimension"
        )
    return math.sqrt(max(ratio, 0.0))


def generalized_volume(d: DistanceMatrix, m: int) -> float:
    """Volume (length^m) of the simplex on the m+1 nodes of ``d``."""
    if d.n != m + 1:
        raise GeometryError(f"need exactly {m + 1} nodes for dimension {m}, got {d.n}")
    return _volume_from_sq(d.sq_dist, m)


def simplex_from_distances(vertex_ids, d: DistanceMatrix, m: int) -> Simplex:
    vol = generalized_volume(d.restrict(vertex_ids), m)
    return Simplex(m, tuple(vertex_ids), vol)


def _hull_volumes(l: int, kappa, d: DistanceMatrix, m: int):
    """Diameter-normalized base volume and the m+1 vertex-replacement volumes.

    Sub-volume k replaces vertex kappa[k] by l. Normalizing the local squared
    distances to unit diameter makes VOLUME_TOL scale-free; barycentric
    ratios are unaffected because volumes are homogeneous in scale.
    """
    kappa = list(kappa)
    if len(kappa) != m + 1:
        raise GeometryError(f"hull set must have {m + 1} nodes, got {len(kappa)}")
    if l in kappa:
        raise GeometryError(f"node {l} cannot be a vertex of its own hull set")
    local = d.restrict([l] + kappa)
    sq = local.sq_dist
    scale = float(sq.max())
    if scale == 0.0:
        raise DegenerateSimplexError("all nodes coincide")
    sqn = sq / scale
    base = _volume_from_sq(sqn[1:, 1:], m)
    subs = np.empty(m + 1)
    for k in range(m + 1):
        keep = [0] + [1 + j for j in range(m + 1) if j != k]
        subs[k] = _volume_from_sq(sqn[np.ix_(keep, keep)], m)
    return base, subs


def convex_hull_inclusion(l: int, kappa, d: DistanceMatrix, m: int) -> HullVerdict:
    """Locate node ``l`` relative to the hull of the m+1 nodes in ``kappa``.

    The point is inside exactly when the vertex-replacement volumes add up
    to the base volume; any excess means it is outside, and a vanishing
    sub-volume on an otherwise matching sum means it sits on a face.
    """
    base, subs = _hull_volumes(l, kappa, d, m)
    if base <= VOLUME_TOL:
        raise DegenerateSimplexError(
            f"hull set {tuple(kappa)} spans no volume in dimension {m}"
        )
    if subs.sum() > base * (1.0 + HULL_REL_TOL):
        return HullVerdict.OUTSIDE
    if subs.min() > VOLUME_TOL:
        return HullVerdict.INSIDE
    return HullVerdict.BOUNDARY


def barycentric_coordinates(l: int, theta, d: DistanceMatrix, m: int) -> BarycentricWeights:
    """Barycentric coordinates of ``l`` with respect to the m+1 nodes ``theta``.

    Weight k is the volume of theta with vertex k swapped for l, divided by
    the volume of theta itself. Requires l inside or on the boundary of the
    hull; weights are renormalized to unit sum to absorb rounding.
    """
    base, subs = _hull_volumes(l, theta, d, m)
    if base <= VOLUME_TOL:
        raise DegenerateSimplexError(
            f"triangulation set {tuple(theta)} spans no volume in dimension {m}"
        )
    if subs.sum() > base * (1.0 + HULL_REL_TOL):
        raise OutsideHullError(
            f"node {l} lies outside the hull of {tuple(theta)}"
        )
    weights = subs / base
    weights = weights / weights.sum()
    return BarycentricWeights(l, tuple(theta), weights)


# ---------------------------------------------------------------------------
# Vectorized strict-interior tests used by the triangulation protocol.
# Semantics match convex_hull_inclusion returning INSIDE; the m = 2 path uses
# the closed-form triangle identity (equivalent to the bordered determinant,
# cross-validated in the test suite) because the set-up phase tests thousands
# of candidate subsets per sensor.
# ---------------------------------------------------------------------------


def _tri_sq_area(a, b, c):
    # squared triangle area from squared side lengths
    return (2.0 * (a * b + b * c + c * a) - a * a - b * b - c * c) / 16.0


def _batch_volumes(bodies: np.ndarray, m: int) -> np.ndarray:
    k = bodies.shape[-1]
    bordered = np.ones(bodies.shape[:-2] + (k + 1, k + 1))
    bordered[..., 0, 0] = 0.0
    bordered[..., 1:, 1:] = bodies
    ratio = np.linalg.det(bordered) / cm_coefficient(m)
    return np.sqrt(np.clip(ratio, 0.0, None))


def batch_strict_inclusion(
    sq_cand: np.ndarray, sq_to_l: np.ndarray, combos: np.ndarray, m: int
) -> np.ndarray:
    """Strict-interior flags of node l against many candidate (m+1)-subsets.

    sq_cand: (n, n) squared distances among candidate nodes.
    sq_to_l: (n,) squared distances from l to each candidate.
    combos:  (K, m+1) integer index rows into the candidate arrays.

    Returns a boolean array of length K, True where l is strictly inside the
    subset's hull (sub-volume sum matches the base volume and every
    sub-volume clears the degeneracy tolerance).
    """
    combos = np.asarray(combos)
    if combos.size == 0:
        return np.zeros(0, dtype=bool)
    tl = sq_to_l[combos]  # (K, m+1)
    if m == 2:
        s01 = sq_cand[combos[:, 0], combos[:, 1]]
        s02 = sq_cand[combos[:, 0], combos[:, 2]]
        s12 = sq_cand[combos[:, 1], combos[:, 2]]
        scale = np.max(
            np.stack([s01, s02, s12, tl[:, 0], tl[:, 1], tl[:, 2]], axis=1), axis=1
        )
        scale = np.where(scale == 0.0, 1.0, scale)
        base = np.sqrt(np.clip(_tri_sq_area(s01, s02, s12) / scale**2, 0.0, None))
        subs = np.stack(
            [
                np.sqrt(np.clip(_tri_sq_area(tl[:, 1], tl[:, 2], s12) / scale**2, 0.0, None)),
                np.sqrt(np.clip(_tri_sq_area(tl[:, 0], tl[:, 2], s02) / scale**2, 0.0, None)),
                np.sqrt(np.clip(_tri_sq_area(tl[:, 0], tl[:, 1], s01) / scale**2, 0.0, None)),
            ],
            axis=1,
        )
    else:
        rows = combos[:, :, None]
        cols = combos[:, None, :]
        body = sq_cand[rows, cols]  # (K, m+1, m+1)
        scale = np.maximum(body.max(axis=(1, 2)), tl.max(axis=1))
        scale = np.where(scale == 0.0, 1.0, scale)
        body = body / scale[:, None, None]
        tln = tl / scale[:, None]
        base = _batch_volumes(body, m)
        subs = np.empty((combos.shape[0], m + 1))
        for k in range(m + 1):
            repl = body.copy()
            repl[:, k, :] = tln
            repl[:, :, k] = tln
            repl[:, k, k] = 0.0
            subs[:, k] = _batch_volumes(repl, m)
    ok_base = base > VOLUME_TOL
    ok_sum = subs.sum(axis=1) <= base * (1.0 + HULL_REL_TOL)
    ok_subs = subs.min(axis=1) > VOLUME_TOL
    return ok_base & ok_sum & ok_subs

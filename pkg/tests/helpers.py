"""Coordinate-based oracles shared across the test suite.

These deliberately avoid the library's distance-only code paths: volumes come
from edge-matrix determinants, barycentric coordinates from a linear solve,
and point location from signed weights. Library results are checked against
these, never the other way around.
"""

import math

import numpy as np


def det_cofactor(mat):
    """Recursive cofactor determinant; slow but independent of LAPACK."""
    m = [list(map(float, row)) for row in mat]
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        total += ((-1) ** j) * m[0][j] * det_cofactor(minor)
    return total


def simplex_volume_coords(pts):
    """Volume of the simplex on m+1 coordinate rows: |det(edges)| / m!."""
    pts = np.asarray(pts, dtype=float)
    m = pts.shape[1]
    assert pts.shape[0] == m + 1
    edges = pts[1:] - pts[0]
    return abs(np.linalg.det(edges)) / math.factorial(m)


def barycentric_oracle(p, verts):
    """Weights w with sum(w) = 1 and sum(w_k * verts[k]) = p, by linear solve."""
    verts = np.asarray(verts, dtype=float)
    p = np.asarray(p, dtype=float)
    n = verts.shape[0]
    a = np.vstack([verts.T, np.ones(n)])
    b = np.concatenate([p, [1.0]])
    w, *_ = np.linalg.lstsq(a, b, rcond=None)
    return w


def halfspace_location(p, verts, tol=1e-9):
    """'inside' / 'boundary' / 'outside' from the signs of oracle weights."""
    w = barycentric_oracle(p, verts)
    if np.any(w < -tol):
        return "outside"
    if np.any(np.abs(w) <= tol):
        return "boundary"
    return "inside"


def random_simplex(rng, m, min_volume=1e-3):
    """Random nondegenerate simplex in [0, 1]^m."""
    while True:
        verts = rng.random((m + 1, m))
        if simplex_volume_coords(verts) > min_volume:
            return verts


def random_interior_point(rng, verts, margin=0.05):
    """Strictly interior point drawn with Dirichlet weights bounded away from 0."""
    n = verts.shape[0]
    w = rng.dirichlet(np.ones(n))
    w = (1.0 - n * margin) * w + margin
    return w @ verts, w


def sq_dist_table(pts):
    pts = np.asarray(pts, dtype=float)
    diff = pts[:, None, :] - pts[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    sq = (sq + sq.T) / 2.0
    np.fill_diagonal(sq, 0.0)
    return sq


# ---------------------------------------------------------------------------
# Frozen 50-node test networks (3 anchors + 47 sensors, m = 2).
# ---------------------------------------------------------------------------

# Equilateral anchor triangle of area ~47, so unit density gives ~50 nodes.
FIFTY_NODE_ANCHORS = np.array([[0.0, 0.0], [10.42, 0.0], [5.21, 9.024]])


def uniform_50_node_field(seed):
    """Exactly 47 i.i.d.-uniform sensors in the anchor triangle.

    A Poisson deployment conditioned on its count is i.i.d. uniform, so this
    pins the node count at 50 while keeping the spatial law.
    """
    from dilocsim.deployment import SensorField

    rng = np.random.default_rng([seed, 7001])
    w = rng.exponential(size=(47, 3))
    w /= w.sum(axis=1, keepdims=True)
    return SensorField(2, FIFTY_NODE_ANCHORS.copy(), w @ FIFTY_NODE_ANCHORS)


def anchor_coupled_50_node_field():
    """Fixed 50-node network with strong anchor coupling (rho(P) ~ 0.8).

    Sensors sit on interleaved shrinking copies of the anchor triangle with
    radial gaps below the tangential spacing, so triangulation sets chain
    outward toward the anchors and absorption is fast. Used for the
    stochastic-limit acceptance run, whose fixed iteration horizon needs a
    network whose intrinsic convergence scale fits inside it.
    """
    from dilocsim.deployment import SensorField

    anchors = FIFTY_NODE_ANCHORS
    centroid = anchors.mean(axis=0)
    basis = np.vstack([anchors.T, np.ones(3)])
    shells = ((0.97, 16), (0.90, 13), (0.81, 10), (0.69, 5), (0.54, 2), (0.35, 1))
    rng = np.random.default_rng(11)
    pts = []
    for k, (scale, count) in enumerate(shells):
        tri = centroid + (anchors - centroid) * scale
        offset = 0.5 / count if k % 2 else 0.0
        for i in range(count):
            t = ((i + offset) / count * 3) % 3
            edge = int(t)
            frac = t - edge
            p = tri[edge] * (1 - frac) + tri[(edge + 1) % 3] * frac
            p = p + rng.normal(0.0, 0.06, 2)
            w = np.linalg.solve(basis, np.append(p, 1.0))
            if w.min() <= 0.003:
                p = centroid + (p - centroid) * 0.98
            pts.append(p)
    return SensorField(2, anchors.copy(), np.array(pts[:47]))

"""Assembly and analysis of the localization iteration matrices.

The network update is one row per sensor: its m+1 barycentric weights,
scattered into an anchor-facing block B (M x (m+1)) and a sensor-facing
block P (M x M). Stacked with an identity over the anchors this is a
row-stochastic iteration matrix; viewed as a Markov chain the anchors are
absorbing and the sensors transient, which is why the solve
(I - P)^-1 B U reproduces the true sensor positions exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

_DENSE_EIG_MAX = 2000  # fallback eigensolve cap
_DIRECT_SOLVE_MAX = 5000  # direct sparse factorization cap


class SystemMatrixError(ValueError):
    """Base class for system construction/solve errors."""


class MissingTriangulationError(SystemMatrixError):
    pass


class SingularSystemError(SystemMatrixError):
    """I - P not invertible to working precision: chain is not absorbing."""


class NoConvergenceError(SystemMatrixError):
    """Spectral radius iteration hit its cap; carries the best estimate."""

    def __init__(self, estimate: float, iterations: int):
        self.estimate = float(estimate)
        self.iterations = int(iterations)
        super().__init__(
            f"power iteration did not converge in {iterations} iterations; "
            f"best estimate {estimate:.12g}"
        )


@dataclass(frozen=True)
class SystemMatrices:
    """Sparse sensor-update blocks; every row of [B | P] is a convex combination."""

    B: sp.csr_matrix
    P: sp.csr_matrix
    m: int

    @property
    def M(self) -> int:
        return self.B.shape[0]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.B.sum(axis=1)).ravel() + np.asarray(
            self.P.sum(axis=1)
        ).ravel()

    def validate(self):
        if self.B.shape != (self.M, self.m + 1) or self.P.shape != (self.M, self.M):
            raise SystemMatrixError("block shapes are inconsistent")
        for block in (self.B, self.P):
            if block.nnz and (block.data.min() < 0.0 or block.data.max() > 1.0):
                raise SystemMatrixError("weights must lie in [0, 1]")
        nnz_per_row = np.diff(self.B.indptr) + np.diff(self.P.indptr)
        if self.M and not np.all(nnz_per_row == self.m + 1):
            raise SystemMatrixError("each sensor row must hold exactly m+1 weights")
        if self.M and np.max(np.abs(self.row_sums() - 1.0)) > 1e-12:
            raise SystemMatrixError("sensor rows must sum to one")
        return self


@dataclass(frozen=True)
class AnchorBlock:
    """Fixed anchor coordinates, one row per anchor; never updated."""

    U: np.ndarray


def build_system_matrices(field, tris) -> SystemMatrices:
    """Scatter every sensor's barycentric weights into the B and P blocks."""
    m = field.m
    M = field.n_sensors
    rows_b, cols_b, vals_b = [], [], []
    rows_p, cols_p, vals_p = [], [], []
    for l in field.sensor_ids:
        if l not in tris:
            raise MissingTriangulationError(f"sensor {l} has no triangulation set")
        t = tris[l]
        row = l - (m + 2)
        for k, w in zip(t.weights.neighbor_ids, t.weights.weights):
            if k <= m + 1:
                rows_b.append(row)
                cols_b.append(k - 1)
                vals_b.append(float(w))
            else:
                rows_p.append(row)
                cols_p.append(k - (m + 2))
                vals_p.append(float(w))
    B = sp.csr_matrix((vals_b, (rows_b, cols_b)), shape=(M, m + 1))
    P = sp.csr_matrix((vals_p, (rows_p, cols_p)), shape=(M, M))
    return SystemMatrices(B, P, m).validate()


def spectral_radius(P, tol=1e-10, max_iters=10_000, seed=0, dense_fallback_max=_DENSE_EIG_MAX):
    """Largest eigenvalue modulus of a nonnegative square matrix.

    Power iteration from a seeded positive start vector; if the norm-ratio
    estimate has not settled at the cap (periodic or otherwise defective
    cases) a dense eigensolve takes over for matrices up to
    ``dense_fallback_max``, else NoConvergenceError reports the best estimate.
    """
    A = sp.csr_matrix(P) if not sp.issparse(P) else P.tocsr()
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise SystemMatrixError("matrix must be square")
    if n == 0 or A.nnz == 0:
        return 0.0
    if A.data.min() < 0.0:
        raise SystemMatrixError("matrix must be nonnegative")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, size=n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iters):
        y = A @ x
        lam = float(np.linalg.norm(y))
        if lam == 0.0:
            return 0.0
        x = y / lam
        # converged when x is an eigenvector to working precision
        residual = float(np.linalg.norm(A @ x - lam * x))
        if residual <= tol * max(lam, 1e-30):
            return lam
    if n <= dense_fallback_max:
        return float(np.max(np.abs(np.linalg.eigvals(A.toarray()))))
    raise NoConvergenceError(lam, max_iters)


def exact_locations_oracle(sys: SystemMatrices, anchors: AnchorBlock) -> np.ndarray:
    """Closed-form sensor positions (I - P)^-1 B U.

    Direct sparse factorization up to a few thousand sensors, iterative solve
    past that; either way the residual is checked to well below the accuracy
    of anything this oracle validates.
    """
    M = sys.M
    U = np.asarray(anchors.U, dtype=float)
    rhs = sys.B @ U
    if M == 0:
        return np.zeros((0, U.shape[1]))
    A = (sp.identity(M, format="csr") - sys.P).tocsc()
    try:
        if M <= _DIRECT_SOLVE_MAX:
            lu = spla.splu(A)
            X = lu.solve(rhs)
        else:
            X = np.empty_like(rhs)
            for j in range(rhs.shape[1]):
                X[:, j], info = spla.lgmres(A, rhs[:, j], rtol=1e-13, atol=0.0)
                if info != 0:
                    raise SingularSystemError("iterative solve failed to converge")
    except RuntimeError as exc:
        raise SingularSystemError(f"factorization of I - P failed: {exc}") from exc
    scale = max(1.0, float(np.abs(rhs).max()))
    residual = np.abs(A @ X - rhs).max() if M else 0.0
    if not np.isfinite(X).all() or residual > 1e-10 * scale:
        raise SingularSystemError(
            f"solve residual {residual:.3e} too large; spectral radius of P is not below one"
        )
    return X


def fundamental_matrix_series(P, terms: int) -> np.ndarray:
    """Truncated transient-power series sum_{k=0}^{terms} P^k (k = 0 gives I).

    Converges to (I - P)^-1 when the spectral radius of P is below one.
    """
    A = sp.csr_matrix(P) if not sp.issparse(P) else P
    n = A.shape[0]
    eye = np.eye(n)
    total = np.eye(n)
    for _ in range(int(terms)):
        total = eye + A @ total  # Horner form of the power sum
    return total


def absorbing_check(sys: SystemMatrices) -> bool:
    """True when every sensor reaches an anchor-connected row through P.

    Reachability makes the chain absorbing, which is exactly the condition
    for the iteration to forget its initial guess.
    """
    M = sys.M
    if M == 0:
        return True
    reach = np.asarray(np.diff(sys.B.indptr) > 0).ravel()
    P_bool = sys.P.astype(bool)
    while True:
        grown = reach | np.asarray((P_bool @ reach)).ravel()
        if np.array_equal(grown, reach):
            break
        reach = grown
    return bool(reach.all())


def dump_matrices(sys: SystemMatrices, path):
    """Coordinate-list text dump of both blocks for external diffing.

    One line per nonzero: block name, 1-based row, 1-based column, value.
    """
    lines = ["# block\trow\tcol\tvalue (1-based block-local indices)"]
    for name, block in (("B", sys.B), ("P", sys.P)):
        coo = block.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            lines.append(f"{name}\t{coo.row[i] + 1}\t{coo.col[i] + 1}\t{coo.data[i]:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

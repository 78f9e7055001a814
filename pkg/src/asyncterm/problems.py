"""Test problems: random linear contractions and a 3-D convection-diffusion step.

The convection-diffusion benchmark is discretized with backward Euler in time
and centered differences in space on ``[0, 1]^3`` with homogeneous Dirichlet
boundaries.  Subdomains form a ``q_x x q_y`` grid in the (x, y)-plane and each
owns the full z-extent; unknowns are numbered subdomain by subdomain so that
every subdomain is one contiguous block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .core import ContractViolation, FixedPointProblem, interface_map, split_blocks


class ConstructionError(ValueError):
    pass


class LinearFixedPoint(FixedPointProblem):
    """``f(x) = M x + c`` with ``M`` sparse (CSR)."""

    def __init__(self, M, c, blocks, alpha=None):
        M = sparse.csr_matrix(M, dtype=float)
        M.eliminate_zeros()
        M.sort_indices()
        self.M = M
        self.c = np.asarray(c, dtype=float)
        n = M.shape[0]
        try:
            xstar = spla.spsolve(sparse.identity(n, format="csc") - M.tocsc(), self.c)
        except RuntimeError as exc:
            raise ConstructionError(f"I - M is singular: {exc}") from exc
        xstar = np.atleast_1d(np.asarray(xstar, dtype=float))
        if not np.all(np.isfinite(xstar)):
            raise ConstructionError("I - M is singular")
        super().__init__(n, blocks, interfaces=interface_map(M, blocks),
                         exact_solution=xstar, contraction_factor=alpha)
        self._rows = [M[lo:hi] for lo, hi in self.blocks]

    @property
    def alpha(self):
        return self.contraction_factor

    def apply_block(self, i, x):
        lo, hi = self.blocks[i]
        return self._rows[i] @ x + self.c[lo:hi]

    def apply(self, x):
        return self.M @ x + self.c


def build_linear(n: int, p: int, alpha: float, seed: int = 0, row_nnz: int = 4) -> LinearFixedPoint:
    """Random sparse ``M`` whose every absolute row sum equals ``alpha``.

    All rows share the same sum, so ``||M||_inf = alpha`` and the spectral
    radius of ``|M|`` is at most ``alpha``.
    """
    if not n >= p >= 1:
        raise ContractViolation(f"need n >= p >= 1, got n={n}, p={p}")
    if not 0 <= alpha < 1:
        raise ContractViolation(f"alpha must lie in [0, 1), got {alpha}")
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1.0, 1.0, n)
    k = min(n, row_nnz)
    if alpha == 0:
        M = sparse.csr_matrix((n, n))
    else:
        rows, cols, vals = [], [], []
        for r in range(n):
            cs = np.sort(rng.choice(n, size=k, replace=False))
            w = rng.uniform(0.2, 1.0, k) * rng.choice([-1.0, 1.0], k)
            w *= alpha / np.abs(w).sum()
            rows.extend([r] * k)
            cols.extend(cs)
            vals.extend(w)
        M = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return LinearFixedPoint(M, c, split_blocks(n, p), alpha=float(alpha))


def jacobi_map(A, b, blocks) -> FixedPointProblem:
    """Pointwise Jacobi map ``f(x)_u = (b_u - sum_{v != u} A_uv x_v) / A_uu``."""
    A = sparse.csr_matrix(A, dtype=float)
    d = A.diagonal()
    M = -sparse.diags(1.0 / d) @ (A - sparse.diags(d))
    return LinearFixedPoint(M, np.asarray(b, float) / d, blocks)


# --- convection-diffusion -------------------------------------------------

@dataclass(eq=False)
class ConvDiffProblem(FixedPointProblem):
    """One backward-Euler step ``A u = u_prev / dt + s`` with hybrid relaxation as ``f``."""

    nx: int
    nu: float
    velocity: tuple[float, float, float]
    source: float
    dt: float
    partition: tuple[int, int]
    A: sparse.csr_matrix = field(repr=False)
    b: np.ndarray = field(repr=False)
    coords: np.ndarray = field(repr=False)
    interface_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        qx, qy = self.partition
        sizes = [(x1 - x0) * (y1 - y0) * self.nx
                 for (x0, x1), (y0, y1) in _subdomain_ranges(self.nx, qx, qy)]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        blocks = list(zip(offsets[:-1], offsets[1:]))
        FixedPointProblem.__init__(self, self.nx ** 3, blocks,
                                   interfaces=interface_map(self.A, blocks))
        owner = np.repeat(np.arange(self.p), sizes)
        self.interface_mask = _interface_mask(self.A, owner)

    @property
    def h(self) -> float:
        return 1.0 / (self.nx + 1)

    def apply_block(self, i, x):
        return hybrid_relaxation_block(self, i, x)

    def algebraic_residual_block(self, i, x):
        lo, hi = self.blocks[i]
        return _block_residual(self.A.indptr, self.A.indices, self.A.data, self.b, x, lo, hi)

    def with_rhs(self, u_prev) -> "ConvDiffProblem":
        """Same operator, right side for a step starting from ``u_prev``."""
        b = np.asarray(u_prev, float) / self.dt + self.source
        return ConvDiffProblem(self.nx, self.nu, self.velocity, self.source, self.dt,
                               self.partition, self.A, b, self.coords, self.interface_mask)

    def grid_values(self, x) -> np.ndarray:
        """Reshape a block-ordered vector into a ``(nx, nx, nx)`` grid indexed ``[ix, iy, iz]``."""
        out = np.empty((self.nx,) * 3)
        out[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = x
        return out


def _subdomain_ranges(nx, qx, qy):
    xs = split_blocks(nx, qx)
    ys = split_blocks(nx, qy)
    # subdomains ordered with y-index fastest
    return [(x, y) for x in xs for y in ys]


def _interface_mask(A, owner):
    row_owner = np.repeat(owner, np.diff(A.indptr))
    foreign = (owner[A.indices] != row_owner).astype(np.int64)
    return np.add.reduceat(foreign, A.indptr[:-1]) > 0


def discretize_convdiff(nx=24, nu=1.0, velocity=(1.0, 1.0, 1.0), source=1.0, dt=0.1,
                        partition=(2, 2), u_prev=None) -> ConvDiffProblem:
    """Assemble the 7-point backward-Euler system for one time step.

    Diagonal ``1/dt + 6 nu / h^2``; neighbor along axis ``d`` in the ``+``
    direction ``-nu/h^2 + a_d/(2h)``, in the ``-`` direction
    ``-nu/h^2 - a_d/(2h)``; ``h = 1/(nx+1)``.
    """
    qx, qy = partition
    if nx < 1 or not (1 <= qx <= nx and 1 <= qy <= nx):
        raise ConstructionError(f"partition {partition} does not fit a grid of {nx}")
    if nu <= 0 or dt <= 0:
        raise ConstructionError(f"nu and dt must be positive, got nu={nu}, dt={dt}")
    h = 1.0 / (nx + 1)
    a = np.asarray(velocity, dtype=float)
    for d, name in enumerate("xyz"):
        if abs(a[d]) * h > 2 * nu:
            raise ConstructionError(
                f"velocity component a_{name}={a[d]} violates |a_{name}|*h <= 2*nu "
                f"(h={h}, nu={nu}); centered convection loses diagonal dominance")
    diag = 1.0 / dt + 6.0 * nu / h ** 2
    plus = -nu / h ** 2 + a / (2 * h)
    minus = -nu / h ** 2 - a / (2 * h)
    off = float(np.sum(np.abs(plus) + np.abs(minus)))
    if not diag > off:
        raise ConstructionError(f"diagonal {diag} does not dominate off-diagonal sum {off}")

    coords = []
    for (x0, x1), (y0, y1) in _subdomain_ranges(nx, qx, qy):
        for ix in range(x0, x1):
            for iy in range(y0, y1):
                for iz in range(nx):
                    coords.append((ix, iy, iz))
    coords = np.array(coords, dtype=np.int64)
    n = nx ** 3
    index = np.empty((nx, nx, nx), dtype=np.int64)
    index[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(n)

    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, diag)]
    for d in range(3):
        for step, coef in ((1, plus[d]), (-1, minus[d])):
            nb_coords = coords.copy()
            nb_coords[:, d] += step
            ok = (nb_coords[:, d] >= 0) & (nb_coords[:, d] < nx)
            rows.append(np.flatnonzero(ok))
            cols.append(index[nb_coords[ok, 0], nb_coords[ok, 1], nb_coords[ok, 2]])
            vals.append(np.full(ok.sum(), coef))
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    A.sort_indices()
    u_prev = np.zeros(n) if u_prev is None else np.asarray(u_prev, dtype=float)
    b = u_prev / dt + source
    return ConvDiffProblem(nx, nu, tuple(a), source, dt, (qx, qy), A, b, coords,
                           np.zeros(n, dtype=np.bool_))


@nb.njit(cache=True)
def _hybrid_sweep(indptr, indices, data, b, x, lo, hi, interface):
    old = x[lo:hi].copy()
    cur = old.copy()
    for r in range(lo, hi):
        s = 0.0
        d = 0.0
        jac = interface[r]
        for k in range(indptr[r], indptr[r + 1]):
            c = indices[k]
            if c == r:
                d = data[k]
            elif lo <= c < hi:
                if jac:
                    s += data[k] * old[c - lo]
                else:
                    s += data[k] * cur[c - lo]
            else:
                s += data[k] * x[c]
        cur[r - lo] = (b[r] - s) / d
    return cur


@nb.njit(cache=True)
def _block_residual(indptr, indices, data, b, x, lo, hi):
    out = np.empty(hi - lo)
    for r in range(lo, hi):
        s = 0.0
        for k in range(indptr[r], indptr[r + 1]):
            s += data[k] * x[indices[k]]
        out[r - lo] = b[r] - s
    return out


def hybrid_relaxation_block(problem: ConvDiffProblem, i: int, x: np.ndarray) -> np.ndarray:
    """One local sweep of block ``i``: Jacobi at interface unknowns, Gauss-Seidel inside.

    Rows are visited in the block's lexicographic order.  Interface rows use
    only pre-sweep values; interior rows use the freshest in-block values.
    Off-block values come from ``x`` (the caller's dependency view).
    """
    A = problem.A
    lo, hi = problem.blocks[i]
    return _hybrid_sweep(A.indptr, A.indices, A.data, problem.b, x, lo, hi,
                         problem.interface_mask)


def algebraic_residual(problem, i, x) -> np.ndarray:
    """Block residual ``b_i - A_i x``; a ``local_fn`` for :class:`ResidualSpec`."""
    return problem.algebraic_residual_block(i, x)


def final_report_residual(problem, x) -> float:
    """``||A x - b||_inf`` of a delivered solution."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.A.shape[0],):
        raise ContractViolation(f"solution has shape {x.shape}, expected ({problem.A.shape[0]},)")
    return float(np.max(np.abs(problem.A @ x - problem.b)))


def direct_solve(problem) -> np.ndarray:
    return spla.spsolve(problem.A.tocsc(), problem.b)


def time_march(problem: ConvDiffProblem, steps: int, u0=None) -> np.ndarray:
    """Advance ``steps`` backward-Euler steps with direct solves."""
    lu = spla.splu(problem.A.tocsc())
    u = np.zeros(problem.n) if u0 is None else np.asarray(u0, float)
    for _ in range(steps):
        u = lu.solve(u / problem.dt + problem.source)
    return u


def export_coo(A, path):
    """Write ``A`` as ``row col value`` lines (0-based)."""
    A = sparse.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write(f"% {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{r} {c} {v:.17g}\n")

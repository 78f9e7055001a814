"""Fixed-point problems, block decomposition, residuals and reductions.

A problem ``x = f(x)`` is split into ``p`` contiguous blocks; process ``i``
owns block ``i`` and applies the submapping ``f_i``.  Residuals are computed
per block and folded by a permutation-invariant reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


class DivergenceError(ArithmeticError):
    """An update produced NaN or Inf."""


def split_blocks(n: int, p: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``p`` contiguous, near-equal, non-empty ranges."""
    if not 1 <= p <= n:
        raise ContractViolation(f"need 1 <= p <= n, got p={p}, n={n}")
    bounds = np.linspace(0, n, p + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def interface_map(pattern, blocks: Sequence[tuple[int, int]]) -> dict[tuple[int, int], np.ndarray]:
    """Global indices of block ``j`` read by the rows of block ``i``.

    Keys are links ``(j, i)`` (sender, receiver); only ``j != i`` pairs with a
    nonempty dependency appear.
    """
    pattern = sparse.csr_matrix(pattern)
    pattern.eliminate_zeros()
    owner = np.empty(pattern.shape[1], dtype=np.int64)
    for b, (lo, hi) in enumerate(blocks):
        owner[lo:hi] = b
    out = {}
    for i, (lo, hi) in enumerate(blocks):
        cols = np.unique(pattern.indices[pattern.indptr[lo]:pattern.indptr[hi]])
        for j in np.unique(owner[cols]):
            if j != i:
                out[(int(j), i)] = cols[owner[cols] == j]
    return out


class FixedPointProblem:
    """A mapping ``f`` split into ``p`` contiguous blocks.

    Subclasses override :meth:`apply_block`; a plain callable can also be
    supplied as ``block_fn(i, x) -> block``.  ``interfaces`` maps each link
    ``(j, i)`` to the indices of block ``j`` that ``f_i`` reads; when omitted,
    every block depends on every other block in full.
    """

    def __init__(self, n, blocks, block_fn=None, interfaces=None,
                 exact_solution=None, contraction_factor=None):
        self.n = int(n)
        self.blocks = [(int(a), int(b)) for a, b in blocks]
        self._check_partition()
        self._block_fn = block_fn
        if interfaces is None:
            interfaces = {(j, i): np.arange(*self.blocks[j])
                          for i in range(self.p) for j in range(self.p) if i != j}
        self.interfaces = {k: np.asarray(v, dtype=np.int64) for k, v in interfaces.items()}
        self.exact_solution = None if exact_solution is None else np.asarray(exact_solution, float)
        if contraction_factor is not None and not 0 <= contraction_factor < 1:
            raise ContractViolation(f"contraction factor must lie in [0, 1), got {contraction_factor}")
        self.contraction_factor = contraction_factor
        self._in = [sorted(j for (j, r) in self.interfaces if r == i) for i in range(self.p)]
        self._out = [sorted(r for (j, r) in self.interfaces if j == i) for i in range(self.p)]

    def _check_partition(self):
        if not self.blocks:
            raise ContractViolation("at least one block is required")
        pos = 0
        for lo, hi in self.blocks:
            if lo != pos or hi <= lo:
                raise ContractViolation(f"blocks must be contiguous, covering and non-empty: {self.blocks}")
            pos = hi
        if pos != self.n:
            raise ContractViolation(f"blocks cover {pos} of {self.n} components")

    @property
    def p(self) -> int:
        return len(self.blocks)

    def block_slice(self, i: int) -> slice:
        return slice(*self.blocks[i])

    def block_size(self, i: int) -> int:
        lo, hi = self.blocks[i]
        return hi - lo

    def in_neighbors(self, i: int) -> list[int]:
        return self._in[i]

    def out_neighbors(self, i: int) -> list[int]:
        return self._out[i]

    def apply_block(self, i: int, x: np.ndarray) -> np.ndarray:
        if self._block_fn is None:
            raise NotImplementedError
        return np.asarray(self._block_fn(i, x), dtype=float)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Full mapping ``f(x)``."""
        return np.concatenate([self.apply_block(i, x) for i in range(self.p)])


@dataclass(frozen=True)
class GlobalView:
    """A full vector together with the version stamp of each block."""

    values: np.ndarray
    version_stamps: tuple[int, ...]

    def check(self, problem: FixedPointProblem):
        if len(self.values) != problem.n or len(self.version_stamps) != problem.p:
            raise ContractViolation(
                f"view has {len(self.values)} values / {len(self.version_stamps)} stamps, "
                f"problem needs {problem.n} / {problem.p}")


def _values(problem, view) -> np.ndarray:
    if isinstance(view, GlobalView):
        view.check(problem)
        return view.values
    values = np.asarray(view, dtype=float)
    if values.shape != (problem.n,):
        raise ContractViolation(f"view has shape {values.shape}, expected ({problem.n},)")
    return values


def fixed_point_defect(problem: FixedPointProblem, i: int, x: np.ndarray) -> np.ndarray:
    """``x_i - f_i(x)``, the default local residual vector."""
    return x[problem.block_slice(i)] - problem.apply_block(i, x)


@dataclass(frozen=True)
class ResidualSpec:
    """How local residuals are measured and combined.

    ``norm`` is ``"max"`` or a number ``q >= 1``.  For ``l(q)`` the local
    values are ``q``-th powers of the block norm and the root is taken once,
    after the fold.  ``local_fn(problem, i, x)`` returns the block residual
    vector; the default is the fixed-point defect ``x_i - f_i(x)``.
    """

    norm: str | float = "max"
    local_fn: Callable | None = None

    def __post_init__(self):
        if self.norm != "max":
            q = float(self.norm)
            if not q >= 1:
                raise ContractViolation(f"l(q) norm needs q >= 1, got {self.norm}")
            object.__setattr__(self, "norm", q)

    @property
    def is_max(self) -> bool:
        return self.norm == "max"

    def block_value(self, vec: np.ndarray) -> float:
        """Local exchanged value for a block residual vector."""
        if vec.size == 0:
            return 0.0
        if self.is_max:
            return float(np.max(np.abs(vec)))
        if self.norm == 2.0:
            return float(np.dot(vec, vec))
        return float(np.sum(np.abs(vec) ** self.norm))

    def combine(self, a: float, b: float) -> float:
        return max(a, b) if self.is_max else a + b

    def finalize(self, folded: float) -> float:
        if self.is_max:
            return folded
        return folded ** (1.0 / self.norm)

    def local_norm(self, value: float) -> float:
        """Undo the power convention so a local value compares against a threshold."""
        return self.finalize(value)

    def residual_vector(self, problem, i, x) -> np.ndarray:
        fn = self.local_fn or fixed_point_defect
        return fn(problem, i, x)

    def norm_of(self, vec: np.ndarray) -> float:
        """Direct global norm of a full vector."""
        if self.is_max:
            return float(np.max(np.abs(vec))) if vec.size else 0.0
        return float(np.linalg.norm(vec, ord=self.norm))


def evaluate_local_residual(problem: FixedPointProblem, spec: ResidualSpec, i: int, view) -> float:
    """Local residual ``r_i`` of block ``i`` at ``view``.

    For ``l(q)`` this is the ``q``-th power of the block norm (squared block
    norm for the Euclidean case); for max it is the block max-norm.
    """
    x = _values(problem, view)
    if not 0 <= i < problem.p:
        raise ContractViolation(f"block index {i} outside 0..{problem.p - 1}")
    return spec.block_value(spec.residual_vector(problem, i, x))


def reduce_residual(spec: ResidualSpec, local_values: Sequence[float]) -> float:
    """Fold local residuals into the global one (``sigma``)."""
    folded = 0.0
    for v in local_values:
        if not v >= 0:
            raise ContractViolation(f"local residuals must be nonnegative, got {v}")
        folded = spec.combine(folded, float(v))
    return spec.finalize(folded)


def true_global_residual(problem: FixedPointProblem, spec: ResidualSpec, view) -> float:
    """Exact global residual ``r(x)`` from a complete view."""
    x = _values(problem, view)
    return reduce_residual(spec, [evaluate_local_residual(problem, spec, i, x)
                                  for i in range(problem.p)])


def direct_residual(problem: FixedPointProblem, spec: ResidualSpec, x: np.ndarray) -> float:
    """Global norm of the concatenated residual vector, without the block fold."""
    x = _values(problem, x)
    vec = np.concatenate([spec.residual_vector(problem, i, x) for i in range(problem.p)])
    return spec.norm_of(vec)


def check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise DivergenceError(f"non-finite value in {what}")


def strict_below(value: float, threshold: float) -> bool:
    return value < threshold and not math.isnan(value)

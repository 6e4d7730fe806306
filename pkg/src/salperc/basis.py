"""B-spline design blocks, difference penalties, and constrained tensor bases.

Every smooth term in the perception model is built from the pieces here:
a B-spline design block over one covariate, a P-spline difference penalty
on the coefficients, an optional null-space penalty (so a smooth can shrink
to exactly zero), and for pairwise interactions a tensor-product block under
a functional-ANOVA constraint that removes the marginal main effects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BasisSpec",
    "PenaltyMatrix",
    "TensorSpec",
    "TensorBlock",
    "build_knots",
    "build_bspline_basis",
    "difference_penalty",
    "null_space_penalty",
    "kron_lift",
    "constraint_null_transform",
    "sum_to_zero_transform",
    "tensor_interaction_basis",
]

# Relative eigenvalue tolerance used to decide what counts as "null space".
NULL_EIG_TOL = 1e-9


@dataclass(frozen=True)
class BasisSpec:
    """Configuration of one univariate B-spline basis.

    ``num_basis`` counts basis functions (columns), not knots.  ``range``
    is the closed covariate interval the basis covers; evaluation inputs
    outside it are clamped to the endpoints.
    """

    covariate: str
    degree: int = 3
    num_basis: int = 10
    knot_placement: str = "uniform"  # "uniform" or "quantile"
    range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if self.num_basis < self.degree + 2:
            raise ValueError(
                f"num_basis must be >= degree+2 ({self.degree + 2}), got {self.num_basis}"
            )
        if self.knot_placement not in ("uniform", "quantile"):
            raise ValueError(f"unknown knot placement {self.knot_placement!r}")
        lo, hi = self.range
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError(f"range endpoints must be finite, got {self.range}")
        if not lo < hi:
            raise ValueError(f"range lower must be < upper, got {self.range}")


@dataclass(frozen=True)
class PenaltyMatrix:
    """Symmetric PSD penalty with a recorded null-space dimension."""

    matrix: np.ndarray
    null_space_dim: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"penalty must be square, got shape {m.shape}")
        if not np.allclose(m, m.T, atol=1e-10):
            raise ValueError("penalty matrix is not symmetric")
        if m.size:
            eigvals = np.linalg.eigvalsh(m)
            scale = max(eigvals[-1], 1.0)
            if eigvals[0] < -1e-10 * scale:
                raise ValueError(f"penalty has negative eigenvalue {eigvals[0]}")
            n_null = int(np.sum(eigvals < NULL_EIG_TOL * scale))
        else:
            n_null = 0
        if n_null != self.null_space_dim:
            raise ValueError(
                f"declared null-space dim {self.null_space_dim} but eigenvalues give {n_null}"
            )
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TensorSpec:
    """Pairwise tensor-product interaction of two marginal bases."""

    marginal_a: BasisSpec
    marginal_b: BasisSpec
    constraint: str = "anova-centered"

    def __post_init__(self):
        if self.constraint != "anova-centered":
            raise ValueError(f"unknown tensor constraint {self.constraint!r}")


def build_knots(spec: BasisSpec, samples: np.ndarray | None = None) -> np.ndarray:
    """Knot vector for ``spec``: ``num_basis + degree + 1`` non-decreasing knots.

    Uniform placement spaces interior knots evenly over ``spec.range`` and
    extends linearly beyond both endpoints.  Quantile placement puts the
    interior knots at sample quantiles (boundary extension stays linear),
    which keeps skewed covariates such as word frequency well covered.
    """
    k, d = spec.num_basis, spec.degree
    lo, hi = spec.range
    n_interior = k - d - 1  # knots strictly inside (lo, hi)
    if spec.knot_placement == "quantile" and samples is not None and len(samples) > 1:
        x = np.asarray(samples, dtype=float)
        qs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
        interior = np.quantile(x, qs)
        interior = np.clip(interior, lo, hi)
    else:
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    # Monotone guard: quantiles of heavily tied samples may coincide.
    interior = np.maximum.accumulate(interior) if len(interior) else interior
    h_lo = (interior[0] - lo) if len(interior) else (hi - lo)
    h_hi = (hi - interior[-1]) if len(interior) else (hi - lo)
    h_lo = h_lo if h_lo > 0 else (hi - lo) / max(k - d, 1)
    h_hi = h_hi if h_hi > 0 else (hi - lo) / max(k - d, 1)
    left = lo - h_lo * np.arange(d, 0, -1)
    right = hi + h_hi * np.arange(1, d + 1)
    knots = np.concatenate([left, [lo], interior, [hi], right])
    assert len(knots) == k + d + 1
    assert np.all(np.diff(knots) >= 0)
    return knots


def build_bspline_basis(
    x: np.ndarray, spec: BasisSpec, knots: np.ndarray | None = None
) -> np.ndarray:
    """Evaluate the B-spline design block (n x num_basis) via Cox-de Boor.

    Inputs are clamped to ``spec.range``; rows sum to one over the basis
    (partition of unity).  Non-finite samples are rejected with the index
    of the first offending value.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    bad = ~np.isfinite(x)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError(f"non-finite covariate sample at index {idx}: {x[idx]}")
    if knots is None:
        knots = build_knots(spec, x)
    lo, hi = spec.range
    x = np.clip(x, lo, hi)
    return _cox_de_boor_design(x, knots, spec.degree, spec.num_basis)


def _cox_de_boor_design(x: np.ndarray, knots: np.ndarray, degree: int, k: int) -> np.ndarray:
    """Iterative (bottom-up) Cox-de Boor evaluation, vectorized over x."""
    n = len(x)
    t = knots
    n_intervals = len(t) - 1
    B = np.zeros((n, n_intervals))
    for j in range(n_intervals):
        if t[j] < t[j + 1]:
            B[:, j] = (t[j] <= x) & (x < t[j + 1])
    # Right endpoint of the basis domain belongs to the last spanned interval.
    at_end = x == t[k]
    if at_end.any():
        B[at_end, :] = 0.0
        B[at_end, k - 1] = 1.0
    for d in range(1, degree + 1):
        prev = B
        B = np.zeros((n, n_intervals - d))
        for j in range(n_intervals - d):
            denom1 = t[j + d] - t[j]
            denom2 = t[j + d + 1] - t[j + 1]
            term = np.zeros(n)
            if denom1 > 0:
                term = term + (x - t[j]) / denom1 * prev[:, j]
            if denom2 > 0:
                term = term + (t[j + d + 1] - x) / denom2 * prev[:, j + 1]
            B[:, j] = term
    return B[:, :k]


def difference_penalty(spec: BasisSpec, order: int = 2) -> PenaltyMatrix:
    """P-spline penalty D'D for the order-th forward difference operator."""
    if order not in (1, 2):
        raise ValueError(f"difference order must be 1 or 2, got {order}")
    k = spec.num_basis
    if order >= k:
        raise ValueError(f"difference order {order} needs more than {k} coefficients")
    D = np.diff(np.eye(k), n=order, axis=0)
    return PenaltyMatrix(matrix=D.T @ D, null_space_dim=order)


def null_space_penalty(p: PenaltyMatrix) -> PenaltyMatrix:
    """Projector onto ``p``'s null space, for double-penalty shrinkage.

    Scaling this projector by its own smoothing parameter penalizes the
    directions (constants, linears) the roughness penalty leaves free, so
    the whole smooth can be shrunk to zero.
    """
    eigvals, eigvecs = np.linalg.eigh(p.matrix)
    scale = max(eigvals[-1], 1.0)
    null_mask = eigvals < NULL_EIG_TOL * scale
    U = eigvecs[:, null_mask]
    proj = U @ U.T
    n_null = int(null_mask.sum())
    return PenaltyMatrix(matrix=proj, null_space_dim=p.size - n_null)


def kron_lift(p: PenaltyMatrix, other_size: int, side: str) -> np.ndarray:
    """Lift a marginal penalty onto the tensor coefficient grid.

    ``side="a"`` lifts the first marginal (S x I), ``side="b"`` the second
    (I x S), matching column order ``column = i_a * k_b + i_b``.
    """
    if side == "a":
        return np.kron(p.matrix, np.eye(other_size))
    if side == "b":
        return np.kron(np.eye(other_size), p.matrix)
    raise ValueError(f"side must be 'a' or 'b', got {side!r}")


def constraint_null_transform(constraints: np.ndarray) -> np.ndarray:
    """Orthonormal basis Z of the null space of a constraint matrix C.

    Columns of the design block times Z satisfy C @ (block coefs) = 0 for
    every coefficient vector, which is how sum-to-zero and ANOVA constraints
    are absorbed into a lower-dimensional unconstrained parameterization.
    """
    C = np.atleast_2d(np.asarray(constraints, dtype=float))
    _, s, vt = np.linalg.svd(C, full_matrices=True)
    tol = max(C.shape) * np.finfo(float).eps * (s[0] if len(s) else 1.0)
    rank = int(np.sum(s > tol))
    return vt[rank:].T


def sum_to_zero_transform(block: np.ndarray) -> np.ndarray:
    """Transform absorbing the constraint that the block's fit sums to zero
    over the training sample (the usual smooth-term identifiability centering)."""
    return constraint_null_transform(block.sum(axis=0)[np.newaxis, :])


def row_kron(a_block: np.ndarray, b_block: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: column i_a*k_b + i_b = A[:, i_a] * B[:, i_b]."""
    n = a_block.shape[0]
    return np.einsum("ni,nj->nij", a_block, b_block).reshape(n, -1)


@dataclass(frozen=True)
class TensorBlock:
    """ANOVA-constrained tensor interaction block with its lifted penalties.

    ``transform`` maps constrained coefficients back onto the full
    ``k_a * k_b`` coefficient grid; both penalties live in the constrained
    parameterization.
    """

    block: np.ndarray
    penalty_a: PenaltyMatrix
    penalty_b: PenaltyMatrix
    transform: np.ndarray = field(repr=False)


def tensor_interaction_basis(
    a_block: np.ndarray,
    b_block: np.ndarray,
    spec: TensorSpec,
    penalty_a: PenaltyMatrix | None = None,
    penalty_b: PenaltyMatrix | None = None,
) -> TensorBlock:
    """Tensor-product interaction under the functional-ANOVA constraint.

    The raw block is the row-wise Kronecker product of the marginals.  The
    constraint removes everything the constant and the two marginal main
    effects already span: each returned column is orthogonal, over the
    sample, to the constant column and to every marginal basis column.
    """
    if a_block.shape[0] != b_block.shape[0]:
        raise ValueError(
            f"marginal blocks built on different samples: {a_block.shape[0]} vs {b_block.shape[0]} rows"
        )
    n = a_block.shape[0]
    k_a, k_b = a_block.shape[1], b_block.shape[1]
    if penalty_a is None:
        penalty_a = difference_penalty(spec.marginal_a)
    if penalty_b is None:
        penalty_b = difference_penalty(spec.marginal_b)
    raw = row_kron(a_block, b_block)
    main_effects = np.hstack([np.ones((n, 1)), a_block, b_block])
    Z = constraint_null_transform(main_effects.T @ raw)
    block = raw @ Z
    S_a = Z.T @ kron_lift(penalty_a, k_b, "a") @ Z
    S_b = Z.T @ kron_lift(penalty_b, k_a, "b") @ Z
    return TensorBlock(
        block=block,
        penalty_a=_as_penalty(S_a),
        penalty_b=_as_penalty(S_b),
        transform=Z,
    )


def _as_penalty(matrix: np.ndarray) -> PenaltyMatrix:
    """Wrap a symmetric PSD matrix, measuring its null-space dimension."""
    m = 0.5 * (matrix + matrix.T)
    eigvals = np.linalg.eigvalsh(m)
    scale = max(eigvals[-1] if len(eigvals) else 0.0, 1.0)
    n_null = int(np.sum(eigvals < NULL_EIG_TOL * scale))
    return PenaltyMatrix(matrix=m, null_space_dim=n_null)

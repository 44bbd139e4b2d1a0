"""Intrinsic GMRF structure matrices and their identifiability constraints.

Covers the ICAR spatial structure (built in :mod:`diseasemap.graph`), the
second-order random walk, IID effects and the four Knorr-Held space-time
interaction types. Interaction vectors use time-fastest layout, so entry
``i * T + t`` holds region ``i`` at time unit ``t`` and Kronecker products
read ``spatial ⊗ temporal``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.sparse as sp

RANK_RTOL = 1e-8
# dense eigendecompositions above this size are skipped (Kronecker ranks use factor spectra)
DENSE_CHECK_LIMIT = 2500


class StructureConsistencyError(ValueError):
    """Declared rank deficiency disagrees with the numerical rank."""


def numerical_rank(eigenvalues: np.ndarray, rtol: float = RANK_RTOL) -> int:
    eigenvalues = np.asarray(eigenvalues)
    if eigenvalues.size == 0:
        return 0
    top = np.max(np.abs(eigenvalues))
    if top == 0:
        return 0
    return int(np.sum(eigenvalues > rtol * top))


@dataclass(frozen=True, eq=False)
class StructureMatrix:
    """Sparse symmetric PSD structure matrix with declared null space.

    ``null_basis`` has orthonormal columns spanning the kernel. Construction
    checks symmetry, the kernel and the declared rank; inconsistencies raise
    :class:`StructureConsistencyError`.
    """

    matrix: sp.csr_matrix
    rank_deficiency: int
    null_basis: np.ndarray
    label: str = ""
    eigenvalues: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        M = sp.csr_matrix(self.matrix, dtype=float)
        object.__setattr__(self, "matrix", M)
        n = M.shape[0]
        if M.shape != (n, n):
            raise ValueError("structure matrix must be square")
        basis = np.asarray(self.null_basis, dtype=float).reshape(n, -1)
        object.__setattr__(self, "null_basis", basis)
        if basis.shape[1] != self.rank_deficiency:
            raise StructureConsistencyError(
                f"{self.label}: null basis has {basis.shape[1]} columns, declared nullity {self.rank_deficiency}"
            )
        if n and abs(M - M.T).max() > 0:
            raise StructureConsistencyError(f"{self.label}: matrix is not symmetric")
        scale = max(self.norm, 1.0)
        if basis.size and np.max(np.abs(M @ basis)) > 1e-8 * scale:
            raise StructureConsistencyError(f"{self.label}: null basis is not annihilated by the matrix")
        if basis.size and np.max(np.abs(basis.T @ basis - np.eye(basis.shape[1]))) > 1e-8:
            raise StructureConsistencyError(f"{self.label}: null basis is not orthonormal")
        eig = self.eigenvalues
        if eig is None and n <= DENSE_CHECK_LIMIT:
            eig = np.linalg.eigvalsh(M.toarray())
            object.__setattr__(self, "eigenvalues", eig)
        if eig is not None:
            if eig.size and eig.min() < -1e-10 * scale:
                raise StructureConsistencyError(f"{self.label}: matrix is not positive semidefinite")
            rank = numerical_rank(eig)
            if n - rank != self.rank_deficiency:
                raise StructureConsistencyError(
                    f"{self.label}: declared nullity {self.rank_deficiency}, numerical nullity {n - rank}"
                )

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def rank(self) -> int:
        return self.dim - self.rank_deficiency

    @property
    def norm(self) -> float:
        if self.matrix.nnz == 0:
            return 0.0
        return float(abs(self.matrix).sum(axis=1).max())

    def quad(self, x: np.ndarray) -> float:
        """x' R x."""
        return float(x @ (self.matrix @ x))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def range_basis(self) -> np.ndarray:
        """Orthonormal basis of the column space (dense eigendecomposition)."""
        vals, vecs = np.linalg.eigh(self.dense())
        keep = vals > RANK_RTOL * max(np.max(np.abs(vals)), 1e-300)
        return vecs[:, keep]

    def to_matrix_market(self, path) -> None:
        scipy.io.mmwrite(str(path), sp.coo_matrix(self.matrix), comment=f"{self.label} nullity={self.rank_deficiency}")


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Linear constraints A x = 0 with orthonormal rows."""

    A: np.ndarray

    @property
    def k(self) -> int:
        return self.A.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.k == 0:
            return x
        return x - self.A.T @ (self.A @ x)

    def violation(self, x: np.ndarray) -> float:
        if self.k == 0:
            return 0.0
        return float(np.max(np.abs(self.A @ x)))


def _orthonormal(columns: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(columns)
    return q


def rw2_structure(T: int) -> StructureMatrix:
    """Second-order random walk structure D'D, D the (T-2) x T second-difference operator."""
    if T < 3:
        raise ValueError(f"RW2 needs at least 3 time units, got {T}")
    D = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(T - 2, T))
    R = sp.csr_matrix(D.T @ D)
    t = np.arange(T, dtype=float)
    basis = _orthonormal(np.column_stack([np.ones(T), t - t.mean()]))
    return StructureMatrix(R, rank_deficiency=2, null_basis=basis, label=f"rw2[T={T}]")


def iid_structure(m: int) -> StructureMatrix:
    if m < 1:
        raise ValueError("IID block needs m >= 1")
    return StructureMatrix(
        sp.identity(m, format="csr"), rank_deficiency=0, null_basis=np.zeros((m, 0)),
        label=f"iid[{m}]", eigenvalues=np.ones(m),
    )


_KINDS = {
    "I": (False, False),
    "II": (False, True),
    "III": (True, False),
    "IV": (True, True),
}


def interaction_structure(kind: str, spatial: StructureMatrix, temporal: StructureMatrix) -> StructureMatrix:
    """Knorr-Held interaction structure for ``kind`` in I, II, III, IV.

    I = I_s⊗I_t, II = I_s⊗R_t, III = R_s⊗I_t, IV = R_s⊗R_t.
    """
    try:
        structured_space, structured_time = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown interaction kind {kind!r}; expected one of I, II, III, IV") from None
    n, T = spatial.dim, temporal.dim
    S = spatial if structured_space else iid_structure(n)
    R = temporal if structured_time else iid_structure(T)
    for factor in (S, R):
        if factor.eigenvalues is None:
            raise StructureConsistencyError(f"{factor.label}: factor spectrum unavailable")
    # cross-check factor declarations before trusting them
    for factor in (S, R):
        if factor.dim - numerical_rank(factor.eigenvalues) != factor.rank_deficiency:
            raise StructureConsistencyError(f"{factor.label}: declared vs numerical rank mismatch")

    M = sp.csr_matrix(sp.kron(S.matrix, R.matrix))
    eig = np.multiply.outer(S.eigenvalues, R.eigenvalues).ravel()

    blocks = []
    if S.rank_deficiency:
        blocks.append(np.kron(S.null_basis, np.eye(T)))
    if R.rank_deficiency:
        s_range = np.eye(n) if not S.rank_deficiency else S.range_basis()
        blocks.append(np.kron(s_range, R.null_basis))
    basis = np.hstack(blocks) if blocks else np.zeros((n * T, 0))
    nullity = n * T - S.rank * R.rank
    return StructureMatrix(M, rank_deficiency=nullity, null_basis=basis, label=f"type{kind}[{n}x{T}]", eigenvalues=eig)


def constraint_set(structure: StructureMatrix) -> ConstraintSet:
    """Hard constraints A = null_basis' making the intrinsic density proper on the subspace."""
    return ConstraintSet(A=np.ascontiguousarray(structure.null_basis.T))


def sample_intrinsic(structure: StructureMatrix, tau: float, rng: np.random.Generator, size: int | None = None):
    """Draw from the intrinsic GMRF with precision tau * R restricted to the constraint subspace.

    Dense eigendecomposition; meant for simulation at modest dimension.
    """
    if structure.dim > DENSE_CHECK_LIMIT:
        raise ValueError("dense sampler limited to small structures")
    vals, vecs = np.linalg.eigh(structure.dense())
    keep = vals > RANK_RTOL * vals.max()
    scale = 1.0 / np.sqrt(tau * vals[keep])
    m = 1 if size is None else size
    z = rng.standard_normal((m, int(keep.sum())))
    x = (z * scale) @ vecs[:, keep].T
    return x[0] if size is None else x

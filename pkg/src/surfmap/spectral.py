"""Laplace-Beltrami eigenbases and spectral coefficients.

A basis holds the first ``k`` solutions of the generalized problem
``W phi = lam A phi`` with ``Phi^T A Phi = I``.  Column signs are
canonicalized (the entry of largest magnitude is positive, first such
entry on ties) so repeated runs agree.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import ContractError, NumericError, ShapeError

# below this size (or when k is too close to n) ARPACK shift-invert is
# pointless; use the dense generalized solver
_DENSE_CUTOFF = 600


@dataclass(frozen=True)
class SpectralBasis:
    """Truncated Laplace-Beltrami eigenbasis of one shape."""

    phi: np.ndarray            # (n, k), A-orthonormal columns
    lam: np.ndarray            # (k,) ascending, lam[0] ~ 0
    mass: np.ndarray           # (n,) lumped vertex areas
    shape_id: str = field(default="", compare=False)

    def __post_init__(self):
        if self.phi.ndim != 2:
            raise ShapeError("phi must be 2-D")
        if self.lam.shape != (self.phi.shape[1],):
            raise ShapeError("lam length must match phi columns")
        if self.mass.shape != (self.phi.shape[0],):
            raise ShapeError("mass length must match phi rows")

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def k(self):
        return self.phi.shape[1]

    def truncated(self, k):
        """View of the first ``k`` eigenpairs."""
        if not 1 <= k <= self.k:
            raise ContractError(f"truncation k={k} outside [1, {self.k}]")
        return SpectralBasis(
            self.phi[:, :k], self.lam[:k], self.mass, self.shape_id
        )


def canonical_signs(phi):
    """Flip column signs so the largest-magnitude entry is positive."""
    picks = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[picks, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def eigenbasis(lap, k, shape_id=""):
    """First ``k`` eigenpairs of ``W phi = lam A phi``.

    Shift-inverted ARPACK with a deterministic start vector on large
    problems, dense generalized ``eigh`` on small ones (or when ``k``
    is within 2 of ``n``, where ARPACK cannot run).
    """
    n = lap.n
    if not 1 <= k <= n:
        raise ContractError(f"k={k} outside [1, n={n}]")

    W = lap.W
    if n <= _DENSE_CUTOFF or k > n - 2:
        lam, phi = scipy.linalg.eigh(
            W.toarray(), np.diag(lap.mass), subset_by_index=[0, k - 1]
        )
    else:
        M = sparse.diags(lap.mass).tocsc()
        v0 = np.full(n, 1.0 / np.sqrt(n))
        try:
            lam, phi = spla.eigsh(
                W.tocsc(), k=k, M=M, sigma=-1e-8, which="LM", v0=v0
            )
        except spla.ArpackNoConvergence as exc:
            raise NumericError(
                f"eigensolver converged only {len(exc.eigenvalues)}/{k} pairs"
            ) from exc

    order = np.argsort(lam)
    lam = lam[order]
    phi = canonical_signs(phi[:, order])
    return SpectralBasis(
        phi=np.ascontiguousarray(phi),
        lam=np.ascontiguousarray(lam),
        mass=np.asarray(lap.mass, dtype=np.float64),
        shape_id=shape_id,
    )


def project(field, basis):
    """Spectral coefficients ``Phi^T A f`` of one field or a stack.

    ``field`` is ``(n,)`` or ``(n, q)``; the result mirrors that shape
    with ``k`` in place of ``n``.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape[0] != basis.n:
        raise ShapeError(
            f"field has {field.shape[0]} values for {basis.n} vertices"
        )
    weighted = field * basis.mass if field.ndim == 1 else field * basis.mass[:, None]
    return basis.phi.T @ weighted


def reconstruct(coeffs, basis):
    """Vertex field from coefficients (zero-padded truncation allowed)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    kc = coeffs.shape[0]
    if kc > basis.k:
        raise ShapeError(f"{kc} coefficients exceed basis size {basis.k}")
    return basis.phi[:, :kc] @ coeffs

"""Dense symmetric linear algebra for windowed spectra.

Everything downstream that needs an eigenvalue spectrum goes through this
module: sliding-window covariance (or Gram) construction, a deterministic
cyclic-Jacobi symmetric eigensolver, and orthonormal column projection.

The eigensolver is cyclic Jacobi rather than a QR-based LAPACK call on
purpose: the row-cyclic sweep order is fixed, so for a given input the
rotation sequence -- and therefore every output bit -- is reproducible, which
keeps golden files and streaming/batch equivalence checks exact.  Cost is
O(m^3) per sweep; matrices here stay small (m <= 512), and the inner kernel
is JIT-compiled when numba is available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericalError

try:  # numba speeds the sweep kernel up ~100x; plain Python is the fallback
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco


__all__ = [
    "Window",
    "CovarianceResult",
    "Spectrum",
    "window_covariance",
    "sym_eig",
    "window_spectrum",
    "project_columns",
]

MAX_SWEEPS = 64
OFFDIAG_TOL = 1e-12
SYMMETRY_TOL = 1e-9
NEG_EIGENVALUE_TOL = 1e-9
ORTHONORMAL_TOL = 1e-8


@dataclass(frozen=True)
class Window:
    """A stack of the last N activation vectors, one token per row."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != 2:
            raise ContractError(f"window must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise ContractError(
                f"window needs at least 2 rows and 2 columns, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractError("window contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def aspect(self) -> float:
        """Aspect ratio c = dim / rows of the originating window."""
        return self.data.shape[1] / self.data.shape[0]


@dataclass(frozen=True)
class CovarianceResult:
    """A symmetric second-moment matrix tagged with which form it is.

    ``form == "covariance"`` means values = (1/N) X^T X (d x d);
    ``form == "gram"`` means values = (1/N) X X^T (N x N), whose nonzero
    spectrum equals the covariance form's.
    """

    values: np.ndarray
    form: str
    rows: int
    dim: int


@dataclass
class Spectrum:
    """Eigenvalues in descending order plus optional orthonormal vectors.

    ``aspect`` records c = dim/rows of the originating window; bare
    ``sym_eig`` calls on a square matrix report aspect 1.0.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None
    aspect: float


def window_covariance(
    window: Window, centered: bool = False, form: str = "auto"
) -> CovarianceResult:
    """Second-moment matrix of a window, in covariance or Gram form.

    With ``form="auto"`` the cheaper side is chosen: covariance
    C = (1/N) X^T X when d <= N, otherwise the Gram matrix G = (1/N) X X^T.
    ``centered`` subtracts column means first (default off: the spectral
    baseline uses the uncentered second moment).
    """
    if form not in ("auto", "covariance", "gram"):
        raise ConfigError(f"unknown covariance form {form!r}")
    x = window.data
    n, d = x.shape
    if centered:
        x = x - x.mean(axis=0)
    if form == "auto":
        form = "covariance" if d <= n else "gram"
    if form == "covariance":
        values = (x.T @ x) / n
    else:
        values = (x @ x.T) / n
    return CovarianceResult(values=values, form=form, rows=n, dim=d)


@njit(cache=True)
def _jacobi_kernel(a, v, accumulate, max_sweeps, threshold):  # pragma: no cover
    m = a.shape[0]
    sweeps = 0
    while True:
        off = 0.0
        for i in range(m - 1):
            for j in range(i + 1, m):
                off += 2.0 * a[i, j] * a[i, j]
        off = np.sqrt(off)
        if off <= threshold or sweeps >= max_sweeps:
            return sweeps, off
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if np.abs(theta) > 1e10:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = 1.0 / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(m):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(m):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                if accumulate:
                    for k in range(m):
                        vkp = v[k, p]
                        vkq = v[k, q]
                        v[k, p] = c * vkp - s * vkq
                        v[k, q] = s * vkp + c * vkq
        sweeps += 1


def sym_eig(matrix: np.ndarray, need_vectors: bool = True) -> Spectrum:
    """Eigendecomposition of a symmetric matrix by row-cyclic Jacobi sweeps.

    Sweeps run until the off-diagonal Frobenius norm falls below
    1e-12 * ||A||_F or 64 sweeps elapse (the latter raises NumericalError
    with the sweep count).  Eigenvalues come back sorted descending; when
    requested, eigenvector columns are orthonormal and sign-fixed so the
    largest-magnitude component is positive (ties break at the first index).

    Diagonal input is returned exactly: every rotation is skipped and the
    diagonal passes through untouched.

    Raises:
        ContractError: if the matrix is not symmetric within 1e-9.
        NumericalError: if 64 sweeps do not reach the tolerance.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix contains non-finite entries")
    if a.shape[0] > 1 and np.max(np.abs(a - a.T)) > SYMMETRY_TOL:
        raise ContractError("matrix is not symmetric within 1e-9")
    m = a.shape[0]
    work = (a + a.T) / 2.0
    vecs = np.eye(m) if need_vectors else np.empty((1, 1))
    threshold = OFFDIAG_TOL * np.linalg.norm(work)
    sweeps, off = _jacobi_kernel(work, vecs, need_vectors, MAX_SWEEPS, threshold)
    if off > threshold:
        raise NumericalError(
            f"Jacobi did not converge in {sweeps} sweeps "
            f"(off-diagonal {off:.3e} > {threshold:.3e})"
        )
    evals = np.diag(work).copy()
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    if not need_vectors:
        return Spectrum(eigenvalues=evals, eigenvectors=None, aspect=1.0)
    vecs = vecs[:, order]
    for j in range(m):
        lead = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[lead, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return Spectrum(eigenvalues=evals, eigenvectors=vecs, aspect=1.0)


def window_spectrum(
    window: Window,
    centered: bool = False,
    need_vectors: bool = False,
) -> Spectrum:
    """Covariance spectrum of a window, padded and clamped for bookkeeping.

    Uses the Gram form when d > N and vectors are not needed; the d - N zero
    eigenvalues implied by rank deficiency are appended explicitly so the
    spectrum always has ``dim`` entries and the aspect stays c = dim/rows.
    Tiny negative eigenvalues (>= -1e-9) are clamped to zero; anything more
    negative means the input was not a covariance and raises NumericalError.
    When eigenvectors are requested the covariance form is forced so the
    vectors live in activation space.
    """
    form = "covariance" if need_vectors else "auto"
    cov = window_covariance(window, centered=centered, form=form)
    spec = sym_eig(cov.values, need_vectors=need_vectors)
    evals = spec.eigenvalues
    if np.any(evals < -NEG_EIGENVALUE_TOL):
        raise NumericalError(
            f"covariance spectrum has eigenvalue {evals.min():.3e} < -1e-9"
        )
    evals = np.where(evals < 0.0, 0.0, evals)
    if cov.form == "gram" and cov.dim > cov.rows:
        evals = np.concatenate([evals, np.zeros(cov.dim - cov.rows)])
    return Spectrum(
        eigenvalues=evals,
        eigenvectors=spec.eigenvectors,
        aspect=window.aspect,
    )


def project_columns(matrix: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Project the columns of ``matrix`` (m x d) onto an orthonormal basis (d x k)."""
    mat = np.asarray(matrix, dtype=float)
    b = np.asarray(basis, dtype=float)
    if b.ndim != 2 or mat.ndim != 2 or mat.shape[1] != b.shape[0]:
        raise ContractError(
            f"shape mismatch: matrix {mat.shape} vs basis {b.shape}"
        )
    d, k = b.shape
    if k > d:
        raise ContractError(f"basis has more columns ({k}) than rows ({d})")
    gram = b.T @ b
    if np.max(np.abs(gram - np.eye(k))) > ORTHONORMAL_TOL:
        raise ContractError("basis columns are not orthonormal within 1e-8")
    return mat @ b

"""Shared numerical kernels: symmetric eigendecomposition, PCA spectra,
kernel-density entropy, and the curve fits used by the analysis pipelines.

Everything here is a pure function of its inputs. Eigendecomposition is a
cyclic Jacobi sweep (the matrices involved are symmetric and small, a few
hundred rows at most), so the module has no dependency beyond numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class NumericalError(RuntimeError):
    """Raised when an iterative routine fails to converge or a fit degenerates
    in a way the caller cannot recover from."""


# ---------------------------------------------------------------------------
# Result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenSpectrum:
    """Sorted eigenvalue spectrum of a feature covariance.

    ``relative`` holds sqrt(lambda_i / lambda_0): side lengths rather than
    variances, so that products of relative values behave like hyper-volumes.
    For a degenerate (all-zero) spectrum ``relative`` is empty.
    """

    raw: np.ndarray        # descending, >= 0
    relative: np.ndarray   # sqrt(raw / raw[0]), first element exactly 1.0
    source_dim: int
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "raw", np.asarray(self.raw, dtype=float))
        object.__setattr__(self, "relative", np.asarray(self.relative, dtype=float))
        if self.raw.size and np.any(np.diff(self.raw) > 1e-12 * max(1.0, abs(self.raw[0]))):
            raise ValueError("eigenvalues must be sorted in descending order")
        if len(self.raw) > self.source_dim:
            raise ValueError("spectrum longer than its source dimension")

    def __len__(self) -> int:
        return len(self.relative)


@dataclass(frozen=True)
class PowerLawFit:
    """Least-squares fit of y = c0 + c / x**gamma."""

    c0: float
    c: float
    gamma: float
    c0_stderr: float
    c_stderr: float
    gamma_stderr: float | None   # None when the fit is degenerate
    r_squared: float
    degenerate: bool = False

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.c0 + self.c * x ** (-self.gamma)


@dataclass(frozen=True)
class LinearFit:
    """Ordinary least squares y = slope * x + intercept."""

    slope: float
    intercept: float
    r_squared: float

    def predict(self, x) -> np.ndarray:
        return self.slope * np.asarray(x, dtype=float) + self.intercept


@dataclass(frozen=True)
class SpectrumDecayFit:
    """Exponential-decay fit log rel_eig(idx) = intercept - alpha * idx."""

    alpha: float
    intercept: float
    window_start: int
    window_stop: int

    def predicted_dim(self, threshold: float) -> float:
        """Index at which the fitted decay crosses ``threshold``."""
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        return (self.intercept - math.log(threshold)) / self.alpha


@dataclass(frozen=True)
class EntropyEstimate:
    """Differential-entropy style estimate in nats.

    ``method`` is either ``"pca-subspace"`` (sum of log relative eigenvalues
    over the first N spectrum entries) or ``"kde"`` (leave-one-out Gaussian
    kernel estimate).  Values from different methods are comparable only up
    to an additive constant.
    """

    value: float
    method: str
    subspace_size: int | None = None
    bandwidth: float | None = None


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition (cyclic Jacobi)
# ---------------------------------------------------------------------------


def _off_diagonal_norm(a: np.ndarray) -> float:
    # Summing squares of the off-diagonal entries directly avoids the
    # catastrophic cancellation of ||A||^2 - ||diag||^2 near convergence.
    b = a.copy()
    np.fill_diagonal(b, 0.0)
    return float(np.linalg.norm(b))


def sym_eig(m, *, symmetry_tol: float = 1e-10, max_sweeps: int = 60):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues descending and
    eigenvectors as orthonormal columns, so m = V @ diag(w) @ V.T.

    Raises ValueError for non-square or asymmetric input and NumericalError
    if the off-diagonal norm fails to fall below 1e-12 (relative).
    """
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    scale = max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > symmetry_tol * scale:
        raise ValueError("matrix is not symmetric within 1e-10 relative tolerance")

    n = a.shape[0]
    A = (a + a.T) / 2.0
    V = np.eye(n)
    if n == 1:
        return A[0, :1].copy(), V

    frob = max(np.linalg.norm(A), np.finfo(float).tiny)
    target = 1e-12 * frob
    prev_off = math.inf
    for _ in range(max_sweeps):
        off = _off_diagonal_norm(A)
        if off <= target:
            break
        # Each rotation reinjects O(eps * frob) rounding noise, so matrices
        # with wide spectra can stall just above the nominal target.  Accept
        # the stall once the sweep stops improving, provided the residual is
        # still orders of magnitude below the reconstruction contract.
        if off >= 0.98 * prev_off and off <= 1e-9 * frob:
            break
        prev_off = off
        # Entries this small cannot lift the off-norm back above target.
        skip = target / (2 * n)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip:
                    continue
                phi = 0.5 * math.atan2(2.0 * apq, A[q, q] - A[p, p])
                c = math.cos(phi)
                s = math.sin(phi)
                # A <- G.T A G with the Givens rotation in the (p, q) plane.
                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = 0.0
                A[q, p] = 0.0
                vec_p = V[:, p].copy()
                vec_q = V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q
    else:
        raise NumericalError(
            f"Jacobi sweep did not converge in {max_sweeps} sweeps "
            f"(off-diagonal norm {_off_diagonal_norm(A):.3e})"
        )

    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


# ---------------------------------------------------------------------------
# PCA spectrum
# ---------------------------------------------------------------------------


def pca(features) -> EigenSpectrum:
    """Eigen-spectrum of the covariance of mean-centered feature rows.

    The relative spectrum is sqrt(lambda_i / lambda_0).  Zero-variance input
    yields a spectrum flagged degenerate (empty relative list).
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if d < 1:
        raise ValueError("PCA needs at least 1 feature dimension")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature entries must be finite")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    raw, _ = sym_eig(cov)
    raw = np.clip(raw, 0.0, None)
    if raw[0] <= 0.0:
        return EigenSpectrum(raw=raw, relative=np.empty(0), source_dim=d, degenerate=True)
    relative = np.sqrt(raw / raw[0])
    relative[0] = 1.0
    return EigenSpectrum(raw=raw, relative=relative, source_dim=d)


def _relative_values(spectrum) -> np.ndarray:
    """Accept an EigenSpectrum or a plain descending sequence of values."""
    if isinstance(spectrum, EigenSpectrum):
        return spectrum.relative
    return np.asarray(spectrum, dtype=float)


# ---------------------------------------------------------------------------
# Gaussian-KDE differential entropy
# ---------------------------------------------------------------------------


def gaussian_kde_entropy(samples, bandwidth="auto", *, chunk: int = 512) -> EntropyEstimate:
    """Leave-one-out Gaussian-KDE entropy estimate, in nats.

    The sample cloud is whitened first (projected onto the subspace of
    non-negligible covariance eigenvalues when the covariance is singular);
    the auto bandwidth is the Scott rate n**(-1/(d+4)) on the whitened data,
    and the log-volume of the whitening transform is added back, so the
    estimate is exactly equivariant under affine maps of the input.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {x.shape}")
    n = x.shape[0]
    if n < 10:
        raise ValueError("KDE entropy needs at least 10 samples")

    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    w, v = sym_eig(cov)
    w = np.clip(w, 0.0, None)
    if w[0] <= 0.0:
        raise ValueError("zero-variance sample cloud has no entropy estimate")
    d = int(np.count_nonzero(w > w[0] * 1e-12))
    v = v[:, :d]
    w = w[:d]
    whitened = (centered @ v) / np.sqrt(w)

    if bandwidth == "auto":
        h = float(n) ** (-1.0 / (d + 4))
    else:
        h = float(bandwidth)
        if h <= 0:
            raise ValueError("bandwidth must be positive")

    # Leave-one-out log density, chunked so the n x n distance matrix never
    # materializes at once.
    sq_norms = np.sum(whitened * whitened, axis=1)
    log_norm = -math.log(n - 1) - 0.5 * d * math.log(2 * math.pi) - d * math.log(h)
    loo_logs = np.empty(n)
    inv_two_h2 = 1.0 / (2.0 * h * h)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = whitened[start:stop]
        d2 = sq_norms[start:stop, None] + sq_norms[None, :] - 2.0 * (block @ whitened.T)
        np.clip(d2, 0.0, None, out=d2)
        z = -d2 * inv_two_h2
        idx = np.arange(start, stop)
        z[idx - start, idx] = -np.inf  # exclude self
        zmax = z.max(axis=1)
        loo_logs[start:stop] = zmax + np.log(np.sum(np.exp(z - zmax[:, None]), axis=1))
    entropy_whitened = -(float(np.mean(loo_logs)) + log_norm)

    # Jacobian of the (inverse) whitening map restores original-space units.
    entropy = entropy_whitened + 0.5 * float(np.sum(np.log(w)))
    return EntropyEstimate(value=entropy, method="kde", subspace_size=d, bandwidth=h)


# ---------------------------------------------------------------------------
# Curve fits
# ---------------------------------------------------------------------------


def fit_linear(x, y) -> LinearFit:
    """Ordinary least squares line fit with r-squared."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if len(np.unique(x)) < 2:
        raise ValueError("linear fit needs at least 2 distinct x values")
    xm = x.mean()
    ym = y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    sxy = float(np.sum((x - xm) * (y - ym)))
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = y - (slope * x + intercept)
    sse = float(np.sum(resid**2))
    sst = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - sse / sst
    return LinearFit(slope=slope, intercept=intercept, r_squared=r2)


def _power_law_sse(x, y, gamma):
    """Closed-form (c0, c) solve for fixed gamma; returns (sse, c0, c)."""
    basis = x ** (-gamma)
    bm = basis.mean()
    ym = y.mean()
    sbb = float(np.sum((basis - bm) ** 2))
    if sbb <= 0.0:
        return float(np.sum((y - ym) ** 2)), ym, 0.0
    c = float(np.sum((basis - bm) * (y - ym))) / sbb
    c0 = ym - c * bm
    resid = y - (c0 + c * basis)
    return float(np.sum(resid**2)), c0, c


GAMMA_GRID_LO = 0.05
GAMMA_GRID_HI = 5.0
GAMMA_GRID_STEP = 0.005


def fit_power_law(x, y) -> PowerLawFit:
    """Fit y = c0 + c / x**gamma by a gamma grid with per-gamma linear solves,
    then golden-section refinement of gamma until the step is below 1e-8.

    Standard errors come from the Gauss-Newton covariance at the optimum.
    A constant y (within 1e-12) short-circuits to a degenerate fit.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if np.any(x <= 0):
        raise ValueError("power-law fit requires strictly positive x")
    if len(np.unique(x)) < 4:
        raise ValueError("power-law fit needs at least 4 distinct x values")

    ym = float(y.mean())
    if float(np.max(np.abs(y - ym))) <= 1e-12:
        return PowerLawFit(
            c0=ym, c=0.0, gamma=1.0,
            c0_stderr=0.0, c_stderr=0.0, gamma_stderr=None,
            r_squared=1.0, degenerate=True,
        )

    grid = np.arange(GAMMA_GRID_LO, GAMMA_GRID_HI + GAMMA_GRID_STEP / 2, GAMMA_GRID_STEP)
    best_gamma = grid[0]
    best_sse = math.inf
    for g in grid:
        sse, _, _ = _power_law_sse(x, y, g)
        if sse < best_sse:
            best_sse = sse
            best_gamma = g

    # Golden-section refinement on the bracketing grid interval.
    lo = max(GAMMA_GRID_LO, best_gamma - GAMMA_GRID_STEP)
    hi = min(GAMMA_GRID_HI, best_gamma + GAMMA_GRID_STEP)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c1 = b - invphi * (b - a)
    c2 = a + invphi * (b - a)
    f1 = _power_law_sse(x, y, c1)[0]
    f2 = _power_law_sse(x, y, c2)[0]
    while (b - a) > 1e-8:
        if f1 <= f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - invphi * (b - a)
            f1 = _power_law_sse(x, y, c1)[0]
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + invphi * (b - a)
            f2 = _power_law_sse(x, y, c2)[0]
    gamma = (a + b) / 2.0
    sse, c0, c = _power_law_sse(x, y, gamma)

    sst = float(np.sum((y - ym) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - sse / sst

    # Gauss-Newton covariance at the optimum.
    n = len(x)
    basis = x ** (-gamma)
    jac = np.column_stack([np.ones(n), basis, -c * np.log(x) * basis])
    dof = max(1, n - 3)
    sigma2 = sse / dof
    try:
        cov = sigma2 * np.linalg.inv(jac.T @ jac)
        errs = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        c0_err, c_err, g_err = (float(errs[0]), float(errs[1]), float(errs[2]))
    except np.linalg.LinAlgError:
        c0_err = c_err = 0.0
        g_err = None
    return PowerLawFit(
        c0=float(c0), c=float(c), gamma=float(gamma),
        c0_stderr=c0_err, c_stderr=c_err, gamma_stderr=g_err,
        r_squared=float(r2),
    )


def fit_spectrum_decay(spectrum, index_window) -> SpectrumDecayFit:
    """Fit log rel_eig(idx) = intercept - alpha * idx over a 0-based index
    window of the (relative) spectrum.

    ``spectrum`` may be an EigenSpectrum or a plain positive sequence; the
    window must hold at least 4 strictly positive, non-increasing values.
    """
    rel = _relative_values(spectrum)
    if isinstance(index_window, range):
        idx = np.array(list(index_window), dtype=int)
    else:
        start, stop = index_window
        idx = np.arange(int(start), int(stop), dtype=int)
    if len(idx) < 4:
        raise ValueError("decay fit needs a window of at least 4 indices")
    if idx.min() < 0 or idx.max() >= len(rel):
        raise ValueError("index window falls outside the spectrum")
    vals = rel[idx]
    if np.any(vals <= 0):
        raise ValueError("zero eigenvalue inside the fit window")
    if np.any(np.diff(vals) > 1e-12 * vals[0]):
        raise ValueError("spectrum is not non-increasing inside the fit window")
    line = fit_linear(idx.astype(float), np.log(vals))
    alpha = -line.slope
    if alpha <= 0:
        raise NumericalError("spectrum window has no measurable decay")
    return SpectrumDecayFit(
        alpha=alpha, intercept=line.intercept,
        window_start=int(idx[0]), window_stop=int(idx[-1]) + 1,
    )

"""Single-kernel mixed model fitted by restricted maximum likelihood.

Model: y = X* beta* + Z g + e with g ~ N(0, sigma2_g K) and
e ~ N(0, sigma2_e I). Both variances are profiled onto the ratio
delta = sigma2_e / sigma2_g. Projecting y onto an orthonormal basis A of
the complement of col(X*) and diagonalizing A' Z K Z' A reduces the
restricted log-likelihood to a cheap one-dimensional function of delta,
maximized over log delta in [1e-5, 1e5] by a grid prescan plus
golden-section refinement. sigma2_g = 0 is admissible and corresponds to
the delta -> infinity limit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import errors
from .ingest import MarkerMatrix
from .kernels import KernelMatrix
from .partition import Region

LOG2PI = math.log(2.0 * math.pi)

DELTA_LO = 1e-5
DELTA_HI = 1e5
GRID_POINTS = 257
# contract asks for 1e-8 in ln(delta); we refine further so that scale
# equivariance of the variance estimates holds to ~1e-12
GOLDEN_TOL = 1e-12
# golden ratio step for the section search
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0

FLAG_NULL = "null"
FLAG_DEGENERATE = "degenerate"
FLAG_RIDGE = "ridge"
FLAG_BOUNDARY_LOWER = "boundary-lower"
FLAG_BOUNDARY_UPPER = "boundary-upper"


@dataclass
class PcBasis:
    """Principal component loadings of an out-of-region marker block."""

    loadings: np.ndarray  # m_out x r, orthonormal in the centered space
    col_means: np.ndarray  # m_out
    r: int
    column_indices: Optional[np.ndarray] = None  # positions in the full matrix

    def transform(self, rows: np.ndarray) -> np.ndarray:
        """Component scores for marker rows over the same columns."""
        R = np.asarray(rows, dtype=float)
        if R.ndim != 2 or R.shape[1] != self.col_means.shape[0]:
            raise errors.ColumnMismatch(
                f"rows have {R.shape[1] if R.ndim == 2 else '?'} columns, "
                f"basis expects {self.col_means.shape[0]}"
            )
        return (R - self.col_means) @ self.loadings

    def scores_from_full(self, values: np.ndarray) -> np.ndarray:
        """Scores from a full marker matrix, selecting the stored columns."""
        if self.column_indices is None:
            return self.transform(values)
        return self.transform(np.asarray(values)[:, self.column_indices])


def pca_out_of_region(markers: MarkerMatrix, region: Region, r: int) -> PcBasis:
    """Top-r principal components of the markers outside one region.

    Works on the lines x markers_out submatrix, column-centered. The
    decomposition runs through the lines x lines Gram matrix so the wide
    direction is never squared.
    """
    if r < 0:
        raise errors.InputError(f"component count must be >= 0, got {r}")
    mask = np.ones(markers.n_markers, dtype=bool)
    mask[region.marker_indices] = False
    out_idx = np.flatnonzero(mask)
    if out_idx.size < r:
        raise errors.InputError(
            f"region leaves {out_idx.size} outside markers, fewer than r={r}"
        )
    M = markers.values[:, out_idx]
    mu = M.mean(axis=0)
    if r == 0:
        return PcBasis(
            loadings=np.zeros((out_idx.size, 0)), col_means=mu, r=0,
            column_indices=out_idx,
        )
    # centered Gram without materializing the centered copy
    G = M @ M.T
    s = M @ mu
    C = np.asarray(G, dtype=float)
    C -= s[:, None]
    C -= s[None, :]
    C += float(mu @ mu)
    C = (C + C.T) / 2.0
    lam, U = np.linalg.eigh(C)
    lam = lam[::-1]
    U = U[:, ::-1]
    tol = max(lam[0], 0.0) * 1e-9
    rank = int(np.count_nonzero(lam > tol))
    r_eff = min(r, rank)
    if r_eff < r:
        warnings.warn(
            f"out-of-region rank {rank} < requested {r} components, reduced",
            errors.RankDeficient,
        )
    if r_eff == 0:
        return PcBasis(
            loadings=np.zeros((out_idx.size, 0)), col_means=mu, r=0,
            column_indices=out_idx,
        )
    U_r = U[:, :r_eff]
    root = np.sqrt(lam[:r_eff])
    # loadings v_i = centered-M' u_i / sqrt(lam_i), orthonormal by construction
    V = (M.T @ U_r - mu[:, None] * U_r.sum(axis=0)[None, :]) / root[None, :]
    return PcBasis(
        loadings=np.asarray(V, dtype=float), col_means=mu, r=r_eff,
        column_indices=out_idx,
    )


@dataclass
class SpmmProblem:
    y: np.ndarray
    Xstar: np.ndarray
    Z: np.ndarray
    K: KernelMatrix
    region_id: str = ""

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.Xstar = np.asarray(self.Xstar, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        n = self.y.shape[0]
        if self.Xstar.ndim != 2 or self.Xstar.shape[0] != n:
            raise errors.DimensionMismatch("Xstar rows must match y")
        if self.Z.ndim != 2 or self.Z.shape[0] != n:
            raise errors.DimensionMismatch("Z rows must match y")
        if self.K.q != self.Z.shape[1]:
            raise errors.DimensionMismatch(
                f"K is {self.K.q}x{self.K.q} but Z has {self.Z.shape[1]} columns"
            )
        if n <= self.Xstar.shape[1]:
            raise errors.DimensionMismatch(
                f"need n > p, got n={n}, p={self.Xstar.shape[1]}"
            )
        if not (
            np.isfinite(self.y).all()
            and np.isfinite(self.Xstar).all()
            and np.isfinite(self.Z).all()
        ):
            raise errors.NonFiniteEntry("model inputs contain non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.Xstar.shape[1]


@dataclass
class SolverState:
    """Spectral summary kept for prediction and likelihood-ratio work."""

    n: int
    p: int
    xi: np.ndarray  # eigenvalues of the projected Z K Z'
    eta2: np.ndarray  # squared orthonormal contrasts of y
    delta: float
    weights: np.ndarray  # q-vector: sigma2_g * Z' V^{-1} (y - X* beta*)
    h_value: Optional[float] = None
    kernel_scale: float = 1.0  # trace-normalization factor of the kernel


@dataclass
class FittedRegionModel:
    sigma2_g: float
    sigma2_e: float
    beta_star: np.ndarray
    region_id: str
    reml_loglik: float
    null_loglik: float
    ebluphat: np.ndarray
    flags: frozenset = field(default_factory=frozenset)
    state: Optional[SolverState] = None

    @property
    def delta(self) -> float:
        return self.state.delta if self.state is not None else math.inf


def profile_loglik(
    xi: np.ndarray, eta2: np.ndarray, df: int, lndelta: np.ndarray
) -> np.ndarray:
    """Restricted log-likelihood profiled over sigma2_g, on a log-delta grid."""
    denom = xi[:, None] + np.exp(np.asarray(lndelta, dtype=float))[None, :]
    s2g = (eta2[:, None] / denom).sum(axis=0) / df
    return -0.5 * (df * (LOG2PI + np.log(s2g) + 1.0) + np.log(denom).sum(axis=0))


def profile_loglik_batch(
    xi: np.ndarray, eta2_rows: np.ndarray, df: int, lndelta: np.ndarray
) -> np.ndarray:
    """Profiled restricted log-likelihood for many contrast vectors at once.

    eta2_rows is S x len(xi); the result is S x len(lndelta). The log
    determinant term is shared across rows so the dominant cost is one
    matrix product.
    """
    denom = xi[:, None] + np.exp(np.asarray(lndelta, dtype=float))[None, :]
    inv = 1.0 / denom
    s2g = (eta2_rows @ inv) / df
    logdet = np.log(denom).sum(axis=0)
    return -0.5 * (df * (LOG2PI + np.log(s2g) + 1.0) + logdet[None, :])


def null_loglik(rss: float, df: int) -> float:
    """Restricted log-likelihood at sigma2_g = 0 (pure-noise model)."""
    if rss <= 0.0:
        return math.inf
    return -0.5 * df * (LOG2PI + math.log(rss / df) + 1.0)


def _golden_max(f, a: float, b: float, tol: float = GOLDEN_TOL):
    """Golden-section maximization of a scalar function on [a, b]."""
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while (b - a) > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = f(x1)
    x = (a + b) / 2.0
    return x, f(x)


def _polish_stationary(f, g, x: float, lo: float, hi: float, fx: float):
    """Sharpen a maximizer by bisecting the sign change of the derivative g.

    Near the optimum the profile is flat to machine epsilon over a window
    much wider than the value-based search can resolve, so comparisons of f
    alone leave the abscissa fuzzy at the 1e-7 level.  The derivative still
    crosses zero steeply there and its sign is scale invariant, which pins
    the optimum (and downstream variance estimates) to full precision.
    """
    w = 1e-4
    a = max(x - w, lo)
    b = min(x + w, hi)
    ga, gb = g(a), g(b)
    if not (math.isfinite(ga) and math.isfinite(gb)) or ga <= 0.0 or gb >= 0.0:
        return x, fx
    for _ in range(60):
        m = 0.5 * (a + b)
        gm = g(m)
        if gm > 0.0:
            a = m
        elif gm < 0.0:
            b = m
        else:
            a = b = m
            break
    xs = 0.5 * (a + b)
    fs = f(xs)
    # fs can trail fx by rounding only; the bracket certifies xs is the
    # stationary point, so prefer it even then
    if math.isfinite(fs) and fs >= fx - 1e-9:
        return xs, fs
    return x, fx


def golden_max_batch(
    f, a: np.ndarray, b: np.ndarray, tol: float = GOLDEN_TOL
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized golden-section maximization over per-row brackets.

    f maps an array of abscissae (one per row) to an array of values; all
    rows iterate in lockstep, one vector evaluation per iteration.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while float((b - a).max(initial=0.0)) > tol:
        right = f1 < f2  # rows whose maximum lies in [x1, b]
        a = np.where(right, x1, a)
        b = np.where(right, b, x2)
        x_keep = np.where(right, x2, x1)
        f_keep = np.where(right, f2, f1)
        x_new = np.where(right, a + _INVPHI * (b - a), b - _INVPHI * (b - a))
        f_new = f(x_new)
        x1 = np.where(right, x_keep, x_new)
        f1 = np.where(right, f_keep, f_new)
        x2 = np.where(right, x_new, x_keep)
        f2 = np.where(right, f_new, f_keep)
    x = (a + b) / 2.0
    return x, f(x)


def _complement_basis(Xstar: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the complement of col(Xstar)."""
    n, p = Xstar.shape
    Q, R = np.linalg.qr(Xstar, mode="complete")
    diag = np.abs(np.diag(R[:p, :p]))
    tol = max(n, p) * np.finfo(float).eps * (diag.max() if diag.size else 0.0)
    if diag.size == 0 or (diag <= tol).any():
        raise errors.SingularXstar(
            "fixed-effect design is rank deficient; drop collinear columns"
        )
    return Q[:, p:]


def spectral_parts(problem: SpmmProblem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A, xi, eta) for the projected model; shared by fit and tests."""
    A = _complement_basis(problem.Xstar)
    H = problem.Z @ (problem.K.values @ problem.Z.T)
    M = A.T @ H @ A
    M = (M + M.T) / 2.0
    xi, W = np.linalg.eigh(M)
    if xi.size and xi[0] < -1e-8 * max(xi[-1], 1.0):
        raise errors.NonPsdK(
            f"projected kernel has eigenvalue {xi[0]:.3e}; kernel is not PSD"
        )
    np.maximum(xi, 0.0, out=xi)
    eta = W.T @ (A.T @ problem.y)
    return A, xi, eta


def fit_reml(
    problem: SpmmProblem,
    grid_points: int = GRID_POINTS,
    tol: float = GOLDEN_TOL,
) -> FittedRegionModel:
    """Restricted-likelihood fit of the one-kernel mixed model."""
    n, p = problem.n, problem.p
    df = n - p
    _, xi, eta = spectral_parts(problem)
    eta2 = eta**2
    rss = float(eta2.sum())
    yscale = float(problem.y @ problem.y)

    if rss <= 1e-14 * max(yscale, 1.0):
        # response sits in the fixed-effect column space: zero residual
        beta = _ols(problem)
        flags = frozenset({FLAG_DEGENERATE, FLAG_NULL})
        state = SolverState(
            n=n, p=p, xi=xi, eta2=eta2, delta=math.inf,
            weights=np.zeros(problem.Z.shape[1]),
            h_value=problem.K.h_value,
            kernel_scale=problem.K.trace_scale,
        )
        return FittedRegionModel(
            sigma2_g=0.0, sigma2_e=0.0, beta_star=beta,
            region_id=problem.region_id,
            reml_loglik=math.inf, null_loglik=math.inf,
            ebluphat=np.zeros(problem.Z.shape[1]),
            flags=flags, state=state,
        )

    lnd = np.linspace(math.log(DELTA_LO), math.log(DELTA_HI), grid_points)
    ll = profile_loglik(xi, eta2, df, lnd)
    if not np.isfinite(ll).all():
        raise errors.ConvergenceFailure(
            "restricted likelihood is not finite on the search grid"
        )
    ll0 = null_loglik(rss, df)

    def f(x: float) -> float:
        d = xi + math.exp(x)
        s2g = float((eta2 / d).sum()) / df
        return -0.5 * (df * (LOG2PI + math.log(s2g) + 1.0) + float(np.log(d).sum()))

    def dfdx(x: float) -> float:
        # derivative of f in x = ln(delta); zero at the profile optimum
        delta = math.exp(x)
        d = xi + delta
        t1 = float((eta2 / d).sum())
        t2 = float((eta2 / d**2).sum())
        s1 = float((delta / d).sum())
        return 0.5 * (df * delta * t2 / t1 - s1)

    # refine every interior local maximum so multimodal profiles are safe
    if ll.size > 2:
        interior = np.flatnonzero((ll[1:-1] >= ll[:-2]) & (ll[1:-1] >= ll[2:])) + 1
    else:
        interior = np.array([], dtype=int)
    candidates = []
    for i in interior:
        x, v = _golden_max(f, float(lnd[i - 1]), float(lnd[i + 1]), tol)
        x, v = _polish_stationary(f, dfdx, x, float(lnd[0]), float(lnd[-1]), v)
        candidates.append((v, x))
    candidates.append((float(ll[0]), float(lnd[0])))
    candidates.append((float(ll[-1]), float(lnd[-1])))
    best_ll, best_x = max(candidates, key=lambda t: t[0])

    flags = set()
    spread = float(ll.max() - ll.min())
    flat = spread <= 1e-10 * max(1.0, abs(float(ll.max()))) and (
        abs(ll0 - float(ll.max())) <= 1e-8 * max(1.0, abs(ll0))
    )
    if flat:
        flags.add(FLAG_RIDGE)

    if ll0 >= best_ll - 1e-9:
        # the no-signal boundary is at least as good as any interior point
        flags.add(FLAG_NULL)
        sigma2_g = 0.0
        sigma2_e = rss / df
        delta = math.inf
        loglik = ll0
        beta = _ols(problem)
        weights = np.zeros(problem.Z.shape[1])
        ghat = np.zeros(problem.Z.shape[1])
    else:
        delta = math.exp(best_x)
        loglik = best_ll
        if best_x <= lnd[0] + tol:
            flags.add(FLAG_BOUNDARY_LOWER)
        elif best_x >= lnd[-1] - tol:
            flags.add(FLAG_BOUNDARY_UPPER)
        sigma2_g = float((eta2 / (xi + delta)).sum()) / df
        sigma2_e = delta * sigma2_g
        beta, weights, ghat = _gls_and_weights(problem, sigma2_g, sigma2_e)

    state = SolverState(
        n=n, p=p, xi=xi, eta2=eta2, delta=delta, weights=weights,
        h_value=problem.K.h_value,
        kernel_scale=problem.K.trace_scale,
    )
    return FittedRegionModel(
        sigma2_g=sigma2_g, sigma2_e=sigma2_e, beta_star=beta,
        region_id=problem.region_id,
        reml_loglik=loglik, null_loglik=ll0,
        ebluphat=ghat, flags=frozenset(flags), state=state,
    )


def _ols(problem: SpmmProblem) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(problem.Xstar, problem.y, rcond=None)
    return beta


def _gls_and_weights(
    problem: SpmmProblem, sigma2_g: float, sigma2_e: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """GLS fixed effects plus the kernel-free part of the EBLUP."""
    Z, K, y, X = problem.Z, problem.K.values, problem.y, problem.Xstar
    V = sigma2_g * (Z @ (K @ Z.T))
    V[np.diag_indices_from(V)] += sigma2_e
    try:
        cf = scipy.linalg.cho_factor(V, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise errors.SingularV(f"covariance not positive definite: {exc}") from exc
    Vi_X = scipy.linalg.cho_solve(cf, X, check_finite=False)
    Vi_y = scipy.linalg.cho_solve(cf, y, check_finite=False)
    XtViX = X.T @ Vi_X
    beta = np.linalg.solve((XtViX + XtViX.T) / 2.0, X.T @ Vi_y)
    resid = y - X @ beta
    Vi_r = scipy.linalg.cho_solve(cf, resid, check_finite=False)
    weights = sigma2_g * (Z.T @ Vi_r)
    ghat = K @ weights
    return beta, weights, ghat


def eblup(fit: FittedRegionModel, problem: SpmmProblem) -> np.ndarray:
    """Expected genetic effects at the fitted variances.

    Evaluates sigma2_g K Z' (sigma2_g Z K Z' + sigma2_e I)^{-1} (y - X* beta*).
    """
    if fit.sigma2_g == 0.0:
        return np.zeros(problem.Z.shape[1])
    _, _, ghat = _gls_and_weights(problem, fit.sigma2_g, fit.sigma2_e)
    return ghat


def predict_local(fit: FittedRegionModel, cross: np.ndarray) -> np.ndarray:
    """Local genetic values for new individuals from a cross-kernel."""
    C = np.atleast_2d(np.asarray(cross, dtype=float))
    w = fit.state.weights if fit.state is not None else None
    if w is None:
        raise errors.NumericalError("fit carries no solver state")
    if C.shape[1] != w.shape[0]:
        raise errors.DimensionMismatch(
            f"cross-kernel has {C.shape[1]} columns, training has {w.shape[0]}"
        )
    return C @ w

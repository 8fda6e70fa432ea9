"""Sparse post-processing of local genetic values.

Fits y ~ beta0 + G alpha + X beta where only alpha is penalized:

    sum_i (y_i - beta0 - G_i alpha - X_i beta)^2
        + lambda1 * sum_j |alpha_j| + lambda2 * sum_j alpha_j^2

Sums are raw (no 1/N factor), so lambda values quoted here are comparable
only under that convention. Solved by cyclic coordinate descent with
soft-thresholding on the alpha coordinates; beta0 and beta take plain
least-squares updates. |alpha_j| doubles as the importance score of
region j. "auto" selects lambda1 by 10-fold cross-validation on a
100-point log path from lambda_max down to lambda_max/1000, and engages
the quadratic penalty (lambda2 = 0.1 lambda1) only when there are more
columns than observations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import errors
from .ingest import FixedEffectTable
from .localvalues import LocalGebvMatrix

AUTO = "auto"
PATH_POINTS = 100
PATH_RATIO = 1e-3
CD_TOL = 1e-9
MAX_SWEEPS = 100_000
MIN_CV_OBS = 20


@dataclass
class CombinerModel:
    beta0: float
    alpha: np.ndarray
    beta: np.ndarray
    lambda1: float
    lambda2: float
    region_ids: Optional[list[str]] = None
    cv_path: list = field(default_factory=list)  # (lambda1, cv mse)
    n_sweeps: int = 0

    @property
    def importance(self) -> np.ndarray:
        return np.abs(self.alpha)


def _as_matrix(G: Union[LocalGebvMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(G, LocalGebvMatrix):
        return G.values
    return np.atleast_2d(np.asarray(G, dtype=float))


def _expand_x(
    X: Union[FixedEffectTable, np.ndarray, None],
    line_ids: Optional[Sequence[str]],
    n: int,
) -> np.ndarray:
    if X is None:
        return np.zeros((n, 0))
    if isinstance(X, FixedEffectTable):
        if line_ids is None:
            raise errors.InputError(
                "per-line covariates need row line ids to expand against"
            )
        idx = {l: i for i, l in enumerate(X.line_ids)}
        missing = [l for l in line_ids if l not in idx]
        if missing:
            raise errors.InputError(
                f"covariates missing for {len(missing)} lines, "
                f"first: {missing[:5]}"
            )
        rows = np.array([idx[l] for l in line_ids])
        return X.design[rows]
    M = np.atleast_2d(np.asarray(X, dtype=float))
    if M.shape[0] != n:
        raise errors.DimensionMismatch(f"covariate rows {M.shape[0]} != {n}")
    return M


def _cd_solve(
    C: np.ndarray,
    cy: np.ndarray,
    n_alpha: int,
    lambda1: float,
    lambda2: float,
    coef: np.ndarray,
    tol: float = CD_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> tuple[np.ndarray, int]:
    """Cyclic coordinate descent on the Gram system.

    C = W'W and cy = W'y for the stacked design W = [G | X | 1]. The
    first n_alpha coordinates are soft-thresholded at lambda1/2 with
    ridge term lambda2; the rest are unpenalized.
    """
    m = C.shape[0]
    thr = lambda1 / 2.0
    # unpenalized coordinates go first so the intercept and covariates
    # absorb their share of y before any alpha faces its threshold
    order = list(range(n_alpha, m)) + list(range(n_alpha))
    for sweep in range(max_sweeps):
        worst = 0.0
        for j in order:
            cjj = C[j, j]
            rho = cy[j] - float(C[j] @ coef) + cjj * coef[j]
            if j < n_alpha:
                d = cjj + lambda2
                if d <= 0.0:
                    new = 0.0
                else:
                    new = math.copysign(max(abs(rho) - thr, 0.0), rho) / d
            else:
                new = rho / cjj if cjj > 0.0 else 0.0
            change = abs(new - coef[j])
            if change > worst:
                worst = change
            coef[j] = new
        if worst < tol:
            # magnitudes under the sweep tolerance are numerically zero
            small = np.abs(coef[:n_alpha]) < tol
            coef[:n_alpha][small] = 0.0
            return coef, sweep + 1
    raise errors.NonConvergence(
        f"coordinate descent did not reach {tol} in {max_sweeps} sweeps"
    )


def _gram(W: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    C = W.T @ W
    return (C + C.T) / 2.0, W.T @ y


def lambda_max(G: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty that zeroes every alpha coordinate."""
    n = y.shape[0]
    U = np.hstack([X, np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(U, y, rcond=None)
    r0 = y - U @ coef
    if G.shape[1] == 0:
        return 0.0
    return float(2.0 * np.max(np.abs(G.T @ r0)))


def objective(
    G: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    beta0: float,
    alpha: np.ndarray,
    beta: np.ndarray,
    lambda1: float,
    lambda2: float,
) -> float:
    r = y - beta0 - G @ alpha - (X @ beta if X.size else 0.0)
    return (
        float(r @ r)
        + lambda1 * float(np.abs(alpha).sum())
        + lambda2 * float(alpha @ alpha)
    )


def fit_combiner(
    G: Union[LocalGebvMatrix, np.ndarray],
    X: Union[FixedEffectTable, np.ndarray, None],
    y: np.ndarray,
    lambda1: Union[float, str] = AUTO,
    lambda2: Union[float, str] = AUTO,
    folds: int = 10,
    tol: float = CD_TOL,
    max_sweeps: int = MAX_SWEEPS,
) -> CombinerModel:
    """Penalized fit of the combined prediction model."""
    Gm = _as_matrix(G)
    yv = np.asarray(y, dtype=float).ravel()
    n, k = Gm.shape
    if yv.shape[0] != n:
        raise errors.DimensionMismatch(f"y has {yv.shape[0]} rows, G has {n}")
    region_ids = G.region_ids if isinstance(G, LocalGebvMatrix) else None
    line_ids = G.line_ids if isinstance(G, LocalGebvMatrix) else None
    Xm = _expand_x(X, line_ids, n)
    p = Xm.shape[1]
    if isinstance(lambda1, str) and lambda1 != AUTO:
        raise errors.InputError(f"lambda1 must be a number or 'auto', got {lambda1!r}")
    if isinstance(lambda2, str) and lambda2 != AUTO:
        raise errors.InputError(f"lambda2 must be a number or 'auto', got {lambda2!r}")
    if not isinstance(lambda1, str) and lambda1 < 0:
        raise errors.InputError("lambda1 must be >= 0")
    if not isinstance(lambda2, str) and lambda2 < 0:
        raise errors.InputError("lambda2 must be >= 0")

    W = np.hstack([Gm, Xm, np.ones((n, 1))])

    def l2_for(l1: float) -> float:
        if lambda2 == AUTO:
            return 0.1 * l1 if k > n else 0.0
        return float(lambda2)

    cv_path: list = []
    if lambda1 == AUTO:
        if n < MIN_CV_OBS:
            raise errors.DegenerateFolds(
                f"cross-validation needs >= {MIN_CV_OBS} observations, got {n}"
            )
        lmax = lambda_max(Gm, Xm, yv)
        if lmax <= 0.0:
            l1 = 0.0
        else:
            path = np.logspace(
                math.log10(lmax), math.log10(PATH_RATIO * lmax), PATH_POINTS
            )
            fold_of = np.arange(n) % folds
            sq_err = np.zeros(PATH_POINTS)
            for f in range(folds):
                test = fold_of == f
                train = ~test
                Ct, cyt = _gram(W[train], yv[train])
                coef = np.zeros(W.shape[1])
                for i, l1_i in enumerate(path):
                    coef, _ = _cd_solve(
                        Ct, cyt, k, l1_i, l2_for(l1_i), coef, tol, max_sweeps
                    )
                    pred = W[test] @ coef
                    sq_err[i] += float(((yv[test] - pred) ** 2).sum())
            cv_mse = sq_err / n
            cv_path = list(zip(path.tolist(), cv_mse.tolist()))
            l1 = float(path[int(np.argmin(cv_mse))])
    else:
        l1 = float(lambda1)

    l2 = l2_for(l1)
    C, cy = _gram(W, yv)
    coef = np.zeros(W.shape[1])
    if lambda1 == AUTO and cv_path:
        # warm-start down the full-data path to the selected point
        for l1_i, _ in cv_path:
            if l1_i < l1:
                break
            coef, sweeps = _cd_solve(
                C, cy, k, l1_i, l2_for(l1_i), coef, tol, max_sweeps
            )
    coef, sweeps = _cd_solve(C, cy, k, l1, l2, coef, tol, max_sweeps)

    return CombinerModel(
        beta0=float(coef[-1]),
        alpha=coef[:k].copy(),
        beta=coef[k : k + p].copy(),
        lambda1=l1,
        lambda2=l2,
        region_ids=list(region_ids) if region_ids is not None else None,
        cv_path=cv_path,
        n_sweeps=sweeps,
    )


def predict_genotypic(
    model: CombinerModel, G_new: Union[LocalGebvMatrix, np.ndarray]
) -> np.ndarray:
    """Estimated genotypic values G alpha, excluding intercept and covariates."""
    Gm = _as_matrix(G_new)
    if Gm.shape[1] != model.alpha.shape[0]:
        raise errors.DimensionMismatch(
            f"G has {Gm.shape[1]} columns, model expects {model.alpha.shape[0]}"
        )
    return Gm @ model.alpha


def predict_full(
    model: CombinerModel,
    G_new: Union[LocalGebvMatrix, np.ndarray],
    X_new: Union[FixedEffectTable, np.ndarray, None] = None,
) -> np.ndarray:
    """Complete prediction: intercept + genotypic value + fixed effects."""
    Gm = _as_matrix(G_new)
    geno = predict_genotypic(model, Gm)
    p = model.beta.shape[0]
    if p == 0:
        return model.beta0 + geno
    line_ids = G_new.line_ids if isinstance(G_new, LocalGebvMatrix) else None
    Xm = _expand_x(X_new, line_ids, Gm.shape[0])
    if Xm.shape[1] != p:
        raise errors.DimensionMismatch(
            f"covariates have {Xm.shape[1]} columns, model expects {p}"
        )
    return model.beta0 + geno + Xm @ model.beta


def importance_scores(model: CombinerModel) -> list[tuple[str, float]]:
    """Regions ranked by |alpha|, descending; ties keep genome order."""
    ids = model.region_ids
    if ids is None:
        ids = [f"col{i + 1}" for i in range(model.alpha.shape[0])]
    imp = np.abs(model.alpha)
    order = sorted(range(len(ids)), key=lambda j: -imp[j])
    return [(ids[j], float(imp[j])) for j in order]


def kkt_violation(
    model: CombinerModel,
    G: Union[LocalGebvMatrix, np.ndarray],
    X: Union[FixedEffectTable, np.ndarray, None],
    y: np.ndarray,
) -> float:
    """Largest stationarity violation of the fitted model.

    For alpha_j != 0 the subgradient must vanish; for alpha_j = 0 the
    gradient magnitude must not exceed lambda1. Unpenalized coordinates
    must have zero gradient. Returns the max absolute violation.
    """
    Gm = _as_matrix(G)
    yv = np.asarray(y, dtype=float).ravel()
    n = Gm.shape[0]
    line_ids = G.line_ids if isinstance(G, LocalGebvMatrix) else None
    Xm = _expand_x(X, line_ids, n)
    r = yv - model.beta0 - Gm @ model.alpha - (Xm @ model.beta if Xm.size else 0.0)
    viol = [abs(-2.0 * float(r.sum()))]  # intercept gradient
    for j in range(Gm.shape[1]):
        grad = -2.0 * float(Gm[:, j] @ r) + 2.0 * model.lambda2 * model.alpha[j]
        if model.alpha[j] != 0.0:
            viol.append(abs(grad + model.lambda1 * math.copysign(1.0, model.alpha[j])))
        else:
            viol.append(max(0.0, abs(grad) - model.lambda1))
    for j in range(Xm.shape[1]):
        viol.append(abs(-2.0 * float(Xm[:, j] @ r)))
    return max(viol)

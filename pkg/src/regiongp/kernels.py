"""Kernel (Gram) matrices over marker submatrices.

Three kernel functions are supported: linear ``x'y``, polynomial
``(x'y + c)^d`` and Gaussian ``exp(-||x - y||^2 / 2h)``. The Gaussian
normalization constant ``1/sqrt(2 pi h)`` is off by default since the
trace normalization applied before model fitting cancels any constant
factor; a flag retains it. Automatic bandwidth sets ``h`` to the mean
squared distance over distinct training-row pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np

from . import errors

AUTO = "auto"


class KernelKind(Enum):
    LINEAR = "linear"
    POLYNOMIAL = "poly"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    kind: KernelKind = KernelKind.GAUSSIAN
    c: float = 1.0
    d: int = 2
    h: Union[float, str] = AUTO
    include_gaussian_norm_constant: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise errors.InputError(f"polynomial degree must be >= 1, got {self.d}")
        if self.h != AUTO and not (isinstance(self.h, (int, float)) and self.h > 0):
            raise errors.InputError(f"bandwidth must be positive or 'auto', got {self.h!r}")


@dataclass
class KernelMatrix:
    values: np.ndarray
    subject_ids: Optional[list[str]]
    spec: KernelSpec
    normalized: bool = False
    h_value: Optional[float] = None  # resolved bandwidth (Gaussian only)
    trace_scale: float = 1.0  # factor applied by trace normalization

    @property
    def q(self) -> int:
        return self.values.shape[0]

    def check_psd(self, rel_tol: float = 1e-8) -> None:
        w = np.linalg.eigvalsh((self.values + self.values.T) / 2)
        if w[0] < -rel_tol * max(w[-1], 0.0):
            raise errors.NonPsdK(
                f"kernel has eigenvalue {w[0]:.3e} below PSD tolerance"
            )


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, rows of A against rows of B."""
    an = np.einsum("ij,ij->i", A, A)
    bn = np.einsum("ij,ij->i", B, B)
    D = an[:, None] + bn[None, :] - 2.0 * (A @ B.T)
    np.maximum(D, 0.0, out=D)
    return D


def auto_bandwidth(train_rows: np.ndarray) -> float:
    """Mean squared distance over distinct pairs of training rows."""
    D = _sq_dists(train_rows, train_rows)
    q = D.shape[0]
    total = D.sum() - np.trace(D)
    npairs = q * (q - 1)
    h = float(total / npairs) if npairs else 0.0
    if h <= 0.0:
        raise errors.ZeroVarianceInput(
            "all rows identical: automatic Gaussian bandwidth is undefined"
        )
    return h


def _resolve_h(spec: KernelSpec, train_rows: np.ndarray) -> Optional[float]:
    if spec.kind is not KernelKind.GAUSSIAN:
        return None
    return auto_bandwidth(train_rows) if spec.h == AUTO else float(spec.h)


def _kernel_values(
    A: np.ndarray, B: np.ndarray, spec: KernelSpec, h: Optional[float]
) -> np.ndarray:
    if spec.kind is KernelKind.LINEAR:
        K = A @ B.T
    elif spec.kind is KernelKind.POLYNOMIAL:
        K = (A @ B.T + spec.c) ** spec.d
    else:
        K = np.exp(-_sq_dists(A, B) / (2.0 * h))
        if spec.include_gaussian_norm_constant:
            K *= 1.0 / math.sqrt(2.0 * math.pi * h)
    if not np.isfinite(K).all():
        raise errors.NonFiniteEntry("kernel computation produced non-finite entries")
    return K


def gram(
    markers: np.ndarray,
    spec: KernelSpec,
    subject_ids: Optional[list[str]] = None,
) -> KernelMatrix:
    """Kernel matrix over the rows of a region submatrix."""
    M = np.asarray(markers, dtype=float)
    if M.ndim != 2 or M.shape[0] < 2 or M.shape[1] < 1:
        raise errors.DimensionMismatch(
            f"need a 2-d matrix with >= 2 rows and >= 1 column, got {M.shape}"
        )
    if not np.isfinite(M).all():
        raise errors.NonFiniteEntry("marker submatrix contains non-finite values")
    h = _resolve_h(spec, M)
    K = _kernel_values(M, M, spec, h)
    K = (K + K.T) / 2.0
    return KernelMatrix(values=K, subject_ids=subject_ids, spec=spec, h_value=h)


def normalize(k: KernelMatrix) -> KernelMatrix:
    """Scale so the mean diagonal entry is 1 (PSD is preserved)."""
    tr = float(np.trace(k.values))
    if tr <= 0.0:
        raise errors.ZeroTrace(f"kernel trace {tr:.3e} is not positive")
    factor = k.q / tr
    return KernelMatrix(
        values=k.values * factor,
        subject_ids=k.subject_ids,
        spec=k.spec,
        normalized=True,
        h_value=k.h_value,
        trace_scale=k.trace_scale * factor,
    )


def cross_gram(
    train_rows: np.ndarray,
    new_rows: np.ndarray,
    spec: KernelSpec,
    h_from_training: Optional[float] = None,
) -> np.ndarray:
    """Kernel values k(new_i, train_j) as a t x q matrix.

    The Gaussian bandwidth must be the one resolved on the training rows;
    passing ``None`` is only valid for non-Gaussian kernels or an explicit
    numeric ``spec.h``.
    """
    T = np.asarray(train_rows, dtype=float)
    N = np.asarray(new_rows, dtype=float)
    if N.ndim != 2 or T.ndim != 2 or N.shape[1] != T.shape[1]:
        raise errors.ColumnMismatch(
            f"new rows have {N.shape[1] if N.ndim == 2 else '?'} columns, "
            f"training has {T.shape[1]}"
        )
    h = h_from_training
    if spec.kind is KernelKind.GAUSSIAN and h is None:
        if spec.h == AUTO:
            raise errors.InputError(
                "cross_gram with automatic bandwidth requires the training value"
            )
        h = float(spec.h)
    return _kernel_values(N, T, spec, h)


def normalized_region_kernel(
    markers: np.ndarray,
    spec: KernelSpec,
    subject_ids: Optional[list[str]] = None,
) -> KernelMatrix:
    """Gram then trace-normalize, the form consumed by the mixed model."""
    return normalize(gram(markers, spec, subject_ids))


def spec_from_options(
    kernel: str,
    poly_c: float = 1.0,
    poly_d: int = 2,
    bandwidth: Union[float, str] = AUTO,
    gaussian_norm_constant: bool = False,
) -> KernelSpec:
    """Build a KernelSpec from CLI-style option values."""
    try:
        kind = KernelKind(kernel)
    except ValueError:
        raise errors.InputError(
            f"unknown kernel {kernel!r}, expected linear|poly|gaussian"
        ) from None
    h: Union[float, str]
    if isinstance(bandwidth, str) and bandwidth != AUTO:
        try:
            h = float(bandwidth)
        except ValueError:
            raise errors.InputError(
                f"bandwidth must be a number or 'auto', got {bandwidth!r}"
            ) from None
    else:
        h = bandwidth
    return KernelSpec(
        kind=kind,
        c=poly_c,
        d=poly_d,
        h=h,
        include_gaussian_norm_constant=gaussian_norm_constant,
    )

"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from regiongp import (
    GeneticMap,
    KernelKind,
    KernelMatrix,
    KernelSpec,
    MarkerMatrix,
    PhenotypeTable,
    SpmmProblem,
)
from regiongp.ingest import Coding, MapEntry, PhenotypeRecord


def psd_kernel(rng: np.random.Generator, q: int) -> KernelMatrix:
    """Random PSD kernel, trace-normalized, wrapped for the solver."""
    B = rng.normal(size=(q, q + 2))
    K = B @ B.T
    K *= q / np.trace(K)
    K = (K + K.T) / 2
    return KernelMatrix(
        values=K,
        subject_ids=None,
        spec=KernelSpec(kind=KernelKind.LINEAR),
        normalized=True,
    )


def random_problem(
    rng: np.random.Generator,
    n: int = 20,
    p: int = 2,
    s2g: float = 1.0,
    s2e: float = 1.0,
) -> SpmmProblem:
    """Draw a problem from the generating model itself (Z = identity)."""
    K = psd_kernel(rng, n)
    Xstar = np.hstack([np.ones((n, 1)), rng.normal(size=(n, p - 1))])
    beta = rng.normal(size=p)
    L = np.linalg.cholesky(K.values + 1e-10 * np.eye(n))
    g = np.sqrt(s2g) * (L @ rng.normal(size=n))
    y = Xstar @ beta + g + np.sqrt(s2e) * rng.normal(size=n)
    return SpmmProblem(y=y, Xstar=Xstar, Z=np.eye(n), K=K)


def marker_matrix(values, line_ids=None, marker_ids=None, coding=Coding.ZERO_ONE) -> MarkerMatrix:
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    if line_ids is None:
        line_ids = [f"L{i:03d}" for i in range(n)]
    if marker_ids is None:
        marker_ids = [f"M{j:03d}" for j in range(m)]
    return MarkerMatrix(
        line_ids=list(line_ids),
        marker_ids=list(marker_ids),
        values=values,
        coding=coding,
        imputed_fraction=np.zeros(m),
    )


def uniform_map(marker_ids, chrom_of=None) -> GeneticMap:
    """One chromosome ("1") unless chrom_of maps ids to chromosome names."""
    entries = []
    pos: dict[str, float] = {}
    for mid in marker_ids:
        c = chrom_of(mid) if chrom_of else "1"
        pos[c] = pos.get(c, -1.0) + 1.0
        entries.append(MapEntry(marker_id=mid, chromosome=c, position=pos[c]))
    return GeneticMap(entries=entries)


def pheno_table(line_ids, values, trait="t", env_ids=None) -> PhenotypeTable:
    if env_ids is None:
        env_ids = [None] * len(line_ids)
    recs = [
        PhenotypeRecord(line_id=l, trait_id=trait, value=float(v), env_id=e)
        for l, v, e in zip(line_ids, values, env_ids)
    ]
    return PhenotypeTable(records=recs)

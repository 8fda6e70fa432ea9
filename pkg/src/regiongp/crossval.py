"""Repeated train/test evaluation of the combined model against
single-kernel baselines, plus trait clustering by importance profiles.

Splits are made by line so replicated phenotypes never straddle a
split. Baselines fit one whole-genome kernel mixed model (linear or
Gaussian) with no principal components; the combined model runs the full
three-stage pipeline on the training lines only. Accuracy is the Pearson
correlation between held-out phenotypes and estimated genotypic values.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import scipy.cluster.hierarchy
import scipy.spatial.distance

from . import errors
from .combiner import AUTO, fit_combiner, predict_genotypic
from .ingest import (
    FixedEffectTable,
    GeneticMap,
    MarkerMatrix,
    PhenotypeTable,
    align,
)
from .kernels import KernelKind, KernelSpec, cross_gram, normalized_region_kernel
from .localvalues import (
    DEFAULT_PC_COUNT,
    _base_design,
    fit_region_ensemble,
    local_gebv_for_new,
)
from .partition import RegionHierarchy
from .reml import fit_reml, predict_local
from .rng import substream

MIN_TEST_LINES = 10


class ModelKind(Enum):
    MK = "mk"
    LINEAR = "lin"
    GAUSSIAN = "gaus"


@dataclass
class CvRow:
    replicate: int
    model: str
    accuracy: float
    rmse: float


@dataclass
class CvReport:
    rows: list[CvRow]
    train_frac: float
    replicates: int
    seed: int
    stream_names: list[str]  # per-replicate substream label
    region_ids: Optional[list[str]] = None
    mean_importance: Optional[np.ndarray] = None

    def summary(self) -> dict[str, tuple[float, float]]:
        """Per model: (mean accuracy, standard deviation across replicates)."""
        acc: dict[str, list[float]] = {}
        for row in self.rows:
            acc.setdefault(row.model, []).append(row.accuracy)
        return {
            m: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
            for m, v in acc.items()
        }


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def _test_obs(
    phenos: PhenotypeTable, trait: str, test_lines: list[str]
) -> tuple[np.ndarray, list[str]]:
    wanted = set(test_lines)
    ys, lines = [], []
    for rec in phenos.for_trait(trait):
        if rec.line_id in wanted:
            ys.append(rec.value)
            lines.append(rec.line_id)
    return np.array(ys, dtype=float), lines


def _baseline_accuracy(
    kind: KernelKind,
    markers_train: MarkerMatrix,
    markers_test: MarkerMatrix,
    phenos: PhenotypeTable,
    trait: str,
    fixed: Optional[FixedEffectTable],
    y_test: np.ndarray,
    test_obs_lines: list[str],
    grid_points: Optional[int],
) -> tuple[float, float]:
    spec = KernelSpec(kind=kind)
    aligned = align(markers_train, phenos, trait)
    Xbase, _ = _base_design(aligned, fixed)
    K = normalized_region_kernel(markers_train.values, spec)
    from .reml import SpmmProblem

    problem = SpmmProblem(
        y=aligned.y, Xstar=Xbase, Z=aligned.Z, K=K, region_id="whole-genome"
    )
    kwargs = {} if grid_points is None else {"grid_points": grid_points}
    fit = fit_reml(problem, **kwargs)
    cross = cross_gram(
        markers_train.values,
        markers_test.values,
        spec,
        h_from_training=fit.state.h_value,
    )
    g_test = predict_local(fit, cross * fit.state.kernel_scale)
    row_of = {l: i for i, l in enumerate(markers_test.line_ids)}
    pred_g = np.array([g_test[row_of[l]] for l in test_obs_lines])
    # full prediction adds the fixed-effect part for the error metric
    if fixed is not None:
        fidx = {l: i for i, l in enumerate(fixed.line_ids)}
        F = np.array([fixed.design[fidx[l]] for l in test_obs_lines])
        full = fit.beta_star[0] + F @ fit.beta_star[1 : 1 + F.shape[1]] + pred_g
    else:
        full = fit.beta_star[0] + pred_g
    acc = _pearson(y_test, pred_g)
    rmse = float(np.sqrt(np.mean((y_test - full) ** 2)))
    return acc, rmse


def run_cv(
    markers: MarkerMatrix,
    gmap: GeneticMap,
    phenos: PhenotypeTable,
    trait: str,
    hierarchy: RegionHierarchy,
    models: Sequence[Union[ModelKind, str]] = (
        ModelKind.MK,
        ModelKind.LINEAR,
        ModelKind.GAUSSIAN,
    ),
    train_frac: float = 0.9,
    replicates: int = 30,
    seed: int = 0,
    kernel_spec: Optional[KernelSpec] = None,
    r: int = DEFAULT_PC_COUNT,
    lambda1: Union[float, str] = AUTO,
    lambda2: Union[float, str] = AUTO,
    fixed: Optional[FixedEffectTable] = None,
    threads: int = 1,
    grid_points: Optional[int] = None,
) -> CvReport:
    """Replicated random-split evaluation; deterministic given seed."""
    if not (0.5 < train_frac < 0.95):
        raise errors.InputError(
            f"train fraction must be in (0.5, 0.95), got {train_frac}"
        )
    if replicates < 1:
        raise errors.InputError(f"need >= 1 replicates, got {replicates}")
    kinds = [ModelKind(m) if isinstance(m, str) else m for m in models]
    if not kinds:
        raise errors.InputError("no models requested")
    if kernel_spec is None:
        kernel_spec = KernelSpec(kind=KernelKind.GAUSSIAN)

    phenotyped = {rec.line_id for rec in phenos.for_trait(trait)}
    eligible = [l for l in markers.line_ids if l in phenotyped]
    if len(eligible) < MIN_TEST_LINES * 2:
        raise errors.TooFewTestLines(
            f"only {len(eligible)} usable lines for trait {trait!r}"
        )

    rows: list[CvRow] = []
    stream_names: list[str] = []
    imp_sum: Optional[np.ndarray] = None
    region_ids: Optional[list[str]] = None
    n_mk = 0
    for rep in range(replicates):
        name = f"cv/{rep}"
        stream_names.append(name)
        rng = substream(seed, "cv", rep)
        perm = rng.permutation(len(eligible))
        n_train = int(round(train_frac * len(eligible)))
        train_lines = [eligible[i] for i in perm[:n_train]]
        test_lines = [eligible[i] for i in perm[n_train:]]
        if len(test_lines) < MIN_TEST_LINES:
            raise errors.TooFewTestLines(
                f"test split has {len(test_lines)} lines, need {MIN_TEST_LINES}"
            )
        markers_train = markers.subset_lines(train_lines)
        markers_test = markers.subset_lines(test_lines)
        y_test, test_obs_lines = _test_obs(phenos, trait, test_lines)

        for kind in kinds:
            if kind is ModelKind.MK:
                ensemble, gmat = fit_region_ensemble(
                    markers_train, gmap, phenos, trait, hierarchy,
                    kernel_spec, r=r, fixed=fixed, threads=threads,
                    grid_points=grid_points,
                )
                model = fit_combiner(
                    gmat, fixed, ensemble.aligned.y,
                    lambda1=lambda1, lambda2=lambda2,
                )
                G_new = local_gebv_for_new(ensemble, markers_test)
                g_line = predict_genotypic(model, G_new)
                row_of = {l: i for i, l in enumerate(markers_test.line_ids)}
                pred_g = np.array([g_line[row_of[l]] for l in test_obs_lines])
                full = model.beta0 + pred_g
                if fixed is not None and model.beta.size:
                    fidx = {l: i for i, l in enumerate(fixed.line_ids)}
                    F = np.array([fixed.design[fidx[l]] for l in test_obs_lines])
                    full = full + F @ model.beta
                acc = _pearson(y_test, pred_g)
                rmse = float(np.sqrt(np.mean((y_test - full) ** 2)))
                rows.append(CvRow(rep, kind.value, acc, rmse))
                imp = model.importance
                if imp_sum is None:
                    imp_sum = np.zeros_like(imp)
                    region_ids = list(gmat.region_ids)
                imp_sum += imp
                n_mk += 1
            else:
                kk = (
                    KernelKind.LINEAR
                    if kind is ModelKind.LINEAR
                    else KernelKind.GAUSSIAN
                )
                acc, rmse = _baseline_accuracy(
                    kk, markers_train, markers_test, phenos, trait, fixed,
                    y_test, test_obs_lines, grid_points,
                )
                rows.append(CvRow(rep, kind.value, acc, rmse))

    mean_imp = imp_sum / n_mk if imp_sum is not None and n_mk else None
    return CvReport(
        rows=rows,
        train_frac=train_frac,
        replicates=replicates,
        seed=seed,
        stream_names=stream_names,
        region_ids=region_ids,
        mean_importance=mean_imp,
    )


def write_cv_report(report: CvReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("replicate\tmodel\taccuracy\trmse\n")
        for row in report.rows:
            fh.write(
                f"{row.replicate}\t{row.model}\t{row.accuracy:.17g}\t"
                f"{row.rmse:.17g}\n"
            )


@dataclass
class TraitSimilarity:
    labels: list[str]
    distances: np.ndarray  # symmetric, zero diagonal
    linkage: np.ndarray  # merge table (standard agglomerative encoding)
    newick: str


def _newick_from_linkage(Z: np.ndarray, labels: list[str]) -> str:
    n = len(labels)
    heights = {i: 0.0 for i in range(n)}
    parts = {i: labels[i] for i in range(n)}
    for step in range(Z.shape[0]):
        a, b, h = int(Z[step, 0]), int(Z[step, 1]), float(Z[step, 2])
        la = h - heights[a]
        lb = h - heights[b]
        node = n + step
        parts[node] = f"({parts[a]}:{la:.10g},{parts[b]}:{lb:.10g})"
        heights[node] = h
    root = n + Z.shape[0] - 1 if Z.shape[0] else 0
    return parts[root] + ";"


def trait_similarity(
    importances: Mapping[str, Sequence[float]]
) -> TraitSimilarity:
    """Distances and an average-linkage tree over trait importance vectors."""
    labels = list(importances.keys())
    if len(labels) < 2:
        raise errors.InputError("need at least 2 traits to compare")
    vectors = [np.asarray(importances[l], dtype=float).ravel() for l in labels]
    length = vectors[0].shape[0]
    for l, v in zip(labels, vectors):
        if v.shape[0] != length:
            raise errors.LengthMismatch(
                f"importance vector for {l!r} has length {v.shape[0]}, "
                f"expected {length}"
            )
    X = np.vstack(vectors)
    condensed = scipy.spatial.distance.pdist(X, metric="euclidean")
    D = scipy.spatial.distance.squareform(condensed)
    Z = scipy.cluster.hierarchy.linkage(condensed, method="average")
    return TraitSimilarity(
        labels=labels,
        distances=D,
        linkage=Z,
        newick=_newick_from_linkage(Z, labels),
    )

"""Per-region fits over a hierarchy and the standardized local-value matrix.

Each region gets its own kernel mixed model: the region's markers form the
kernel, the remaining markers enter as principal component covariates so a
region is credited only with variance beyond background genome structure.
Training EBLUPs, mapped to observations and standardized column by column,
form the matrix the sparse combiner consumes.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import errors
from .ingest import (
    AlignResult,
    FixedEffectTable,
    GeneticMap,
    MarkerMatrix,
    PhenotypeTable,
    align,
    expand_fixed_effects,
)
from .kernels import KernelSpec, cross_gram, normalized_region_kernel
from .partition import Region, RegionHierarchy
from .reml import (
    FittedRegionModel,
    PcBasis,
    SpmmProblem,
    fit_reml,
    pca_out_of_region,
    predict_local,
)

CONSTANT_SD_TOL = 1e-14
DEFAULT_PC_COUNT = 5


@dataclass
class LocalGebvMatrix:
    """Standardized local genetic values, one column per fitted region."""

    values: np.ndarray  # N x k, N observations
    region_ids: list[str]
    col_means: np.ndarray
    col_sds: np.ndarray  # 0.0 marks a constant (flagged) column
    line_ids: list[str]  # per-row line ids
    flagged: np.ndarray  # bool, k

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class RegionEnsemble:
    """Everything needed to evaluate local values for new individuals."""

    regions: list[Region]
    fits: list[Optional[FittedRegionModel]]
    pc_bases: list[Optional[PcBasis]]
    kernel_spec: KernelSpec
    col_means: np.ndarray
    col_sds: np.ndarray
    flagged: np.ndarray
    train_markers: MarkerMatrix
    aligned: Optional[AlignResult]  # absent on a model loaded for prediction
    failures: dict = field(default_factory=dict)  # region_id -> message

    @property
    def region_ids(self) -> list[str]:
        return [r.id for r in self.regions]


def build_problem(
    markers: MarkerMatrix,
    aligned: AlignResult,
    Xbase: np.ndarray,
    region: Region,
    kernel_spec: KernelSpec,
    r: int,
) -> tuple[SpmmProblem, Optional[PcBasis]]:
    """Assemble the mixed-model inputs for one region.

    The fixed-effect design is Xbase (intercept plus any covariates)
    extended with out-of-region principal component scores mapped through
    the incidence matrix. r is clamped to the available outside markers.
    """
    sub = markers.values[:, region.marker_indices]
    K = normalized_region_kernel(sub, kernel_spec)
    n_out = markers.n_markers - region.marker_indices.size
    r_eff = min(r, n_out)
    pcb: Optional[PcBasis] = None
    Xstar = Xbase
    if r_eff > 0:
        pcb = pca_out_of_region(markers, region, r_eff)
        if pcb.r > 0:
            scores = pcb.scores_from_full(markers.values)
            Xstar = np.hstack([Xbase, aligned.Z @ scores])
    problem = SpmmProblem(
        y=aligned.y, Xstar=Xstar, Z=aligned.Z, K=K, region_id=region.id
    )
    return problem, pcb


def _base_design(
    aligned: AlignResult, fixed: Optional[FixedEffectTable]
) -> tuple[np.ndarray, list[str]]:
    cols = [np.ones((aligned.y.shape[0], 1))]
    names = ["intercept"]
    if fixed is not None:
        F, fnames = expand_fixed_effects(fixed, aligned)
        cols.append(F)
        names.extend(fnames)
    return np.hstack(cols), names


def fit_region_ensemble(
    markers: MarkerMatrix,
    gmap: GeneticMap,
    phenos: PhenotypeTable,
    trait: str,
    hierarchy: RegionHierarchy,
    kernel_spec: KernelSpec,
    r: int = DEFAULT_PC_COUNT,
    fixed: Optional[FixedEffectTable] = None,
    include: str = "leaves",
    threads: int = 1,
    grid_points: Optional[int] = None,
) -> tuple[RegionEnsemble, LocalGebvMatrix]:
    """Fit every region model and assemble the standardized value matrix.

    include selects the columns: "leaves" (default) or "all" for every
    hierarchy level including root and chromosomes. Region fits run on a
    thread pool; results are assembled in region order regardless of
    completion order. A region whose fit fails contributes a zero column
    and a warning; more than half failing is an error.
    """
    if include == "leaves":
        regions = hierarchy.leaves()
    elif include == "all":
        regions = hierarchy.all_regions()
    else:
        raise errors.InputError(
            f"include must be 'leaves' or 'all', got {include!r}"
        )
    if not regions:
        raise errors.InputError("hierarchy has no regions to fit")
    aligned = align(markers, phenos, trait)
    Xbase, _ = _base_design(aligned, fixed)
    fit_kwargs = {} if grid_points is None else {"grid_points": grid_points}

    def task(region: Region):
        problem, pcb = build_problem(
            markers, aligned, Xbase, region, kernel_spec, r
        )
        fit = fit_reml(problem, **fit_kwargs)
        return fit, pcb

    results: list = [None] * len(regions)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(task, reg) for reg in regions]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except (errors.RegionGpError, np.linalg.LinAlgError) as exc:
                    results[i] = exc
    else:
        for i, reg in enumerate(regions):
            try:
                results[i] = task(reg)
            except (errors.RegionGpError, np.linalg.LinAlgError) as exc:
                results[i] = exc

    n_obs = aligned.y.shape[0]
    k = len(regions)
    raw = np.zeros((n_obs, k))
    fits: list[Optional[FittedRegionModel]] = [None] * k
    bases: list[Optional[PcBasis]] = [None] * k
    failures: dict = {}
    for i, (reg, res) in enumerate(zip(regions, results)):
        if isinstance(res, Exception):
            failures[reg.id] = str(res)
            warnings.warn(
                f"region {reg.id} fit failed ({res}); column zeroed",
                errors.RegionFitFailed,
            )
            continue
        fit, pcb = res
        fits[i] = fit
        bases[i] = pcb
        raw[:, i] = aligned.Z @ fit.ebluphat
    if failures and len(failures) * 2 > k:
        raise errors.TooManyFailedRegions(
            f"{len(failures)} of {k} region fits failed"
        )

    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    flagged = np.zeros(k, dtype=bool)
    values = np.zeros_like(raw)
    for i in range(k):
        if fits[i] is None or sds[i] <= CONSTANT_SD_TOL * max(1.0, abs(means[i])):
            flagged[i] = True
            sds[i] = 0.0
        else:
            values[:, i] = (raw[:, i] - means[i]) / sds[i]

    matrix = LocalGebvMatrix(
        values=values,
        region_ids=[reg.id for reg in regions],
        col_means=means,
        col_sds=sds,
        line_ids=list(aligned.obs_line_ids),
        flagged=flagged,
    )
    ensemble = RegionEnsemble(
        regions=list(regions),
        fits=fits,
        pc_bases=bases,
        kernel_spec=kernel_spec,
        col_means=means,
        col_sds=sds,
        flagged=flagged,
        train_markers=markers,
        aligned=aligned,
        failures=failures,
    )
    return ensemble, matrix


def fit_all_regions(
    markers: MarkerMatrix,
    gmap: GeneticMap,
    phenos: PhenotypeTable,
    trait: str,
    hierarchy: RegionHierarchy,
    kernel_spec: KernelSpec,
    r: int = DEFAULT_PC_COUNT,
    **kwargs,
) -> tuple[list[Optional[FittedRegionModel]], LocalGebvMatrix]:
    """Region fits plus the standardized matrix; see fit_region_ensemble."""
    ensemble, matrix = fit_region_ensemble(
        markers, gmap, phenos, trait, hierarchy, kernel_spec, r=r, **kwargs
    )
    return ensemble.fits, matrix


def local_gebv_for_new(
    ensemble: RegionEnsemble, markers_new: MarkerMatrix
) -> np.ndarray:
    """Standardized local values for new lines, training statistics applied.

    Rows follow markers_new line order; flagged columns are zero.
    """
    train = ensemble.train_markers
    if markers_new.marker_ids != train.marker_ids:
        raise errors.ColumnMismatch(
            "new marker matrix must carry the training marker columns "
            f"({markers_new.n_markers} vs {train.n_markers})"
        )
    t = markers_new.n_lines
    k = len(ensemble.regions)
    out = np.zeros((t, k))
    for i, (reg, fit) in enumerate(zip(ensemble.regions, ensemble.fits)):
        if ensemble.flagged[i] or fit is None:
            continue
        idx = reg.marker_indices
        cross = cross_gram(
            train.values[:, idx],
            markers_new.values[:, idx],
            ensemble.kernel_spec,
            h_from_training=fit.state.h_value if fit.state else None,
        )
        # the training kernel was trace-normalized; the cross block must
        # carry the same scale for predictions to be consistent
        scale = fit.state.kernel_scale if fit.state else 1.0
        raw = predict_local(fit, cross * scale)
        out[:, i] = (raw - ensemble.col_means[i]) / ensemble.col_sds[i]
    return out

"""Plain-text persistence of a fitted model.

A bundle is a directory of versioned TSV files plus a JSON manifest:
training markers, the region hierarchy, per-region parameters and
prediction weights, principal component bases, combiner coefficients,
and the importance table. Everything needed to score new individuals is
inside the directory; nothing references the original input paths except
as recorded checksums.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import __version__, errors
from .combiner import CombinerModel
from .ingest import (
    Coding,
    FixedEffectTable,
    GeneticMap,
    MarkerMatrix,
    parse_markers,
    write_markers,
)
from .kernels import AUTO, KernelKind, KernelSpec
from .localvalues import LocalGebvMatrix, RegionEnsemble, local_gebv_for_new
from .partition import Region, read_region_file, region_span, write_region_file
from .reml import FittedRegionModel, PcBasis, SolverState

FORMAT_NAME = "regiongp-bundle"
FORMAT_VERSION = 1

MANIFEST = "manifest.json"
HIERARCHY = "hierarchy.tsv"
MARKERS = "markers.tsv"
REGIONS = "regions.tsv"
WEIGHTS = "weights.tsv"
COMBINER = "combiner.tsv"
IMPORTANCE = "importance.tsv"
PC_DIR = "pc_basis"


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def file_checksum(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _marker_checksum(marker_ids: list[str]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for mid in marker_ids:
        h.update(mid.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def write_importance_table(
    path,
    regions: list[Region],
    importance: np.ndarray,
    gmap: Optional[GeneticMap],
    markers: MarkerMatrix,
) -> None:
    """TSV of per-region importance with genomic spans, genome order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("region_id\tchromosome\tstart_pos\tend_pos\timportance\n")
        for reg, imp in zip(regions, importance):
            if gmap is not None:
                chrom, start, end = region_span(reg, gmap, markers)
                srow = f"{chrom}\t{_fmt(start)}\t{_fmt(end)}"
            else:
                srow = "*\tNA\tNA"
            fh.write(f"{reg.id}\t{srow}\t{_fmt(float(imp))}\n")


def save_bundle(
    outdir,
    ensemble: RegionEnsemble,
    matrix: LocalGebvMatrix,
    model: CombinerModel,
    gmap: GeneticMap,
    hierarchy,
    options: Optional[dict] = None,
    input_checksums: Optional[dict] = None,
) -> None:
    """Write a fitted pipeline to a directory (created if needed)."""
    os.makedirs(outdir, exist_ok=True)
    os.makedirs(os.path.join(outdir, PC_DIR), exist_ok=True)
    train = ensemble.train_markers

    write_region_file(hierarchy, train, os.path.join(outdir, HIERARCHY))
    write_markers(train, os.path.join(outdir, MARKERS), format="tsv")

    with open(os.path.join(outdir, REGIONS), "w", encoding="utf-8") as fh:
        fh.write(
            "region_id\tsigma2_g\tsigma2_e\tdelta\treml_loglik\tnull_loglik\t"
            "h_value\tkernel_scale\tcol_mean\tcol_sd\tflagged\tflags\tfailure\n"
        )
        for i, reg in enumerate(ensemble.regions):
            fit = ensemble.fits[i]
            if fit is None:
                row = [reg.id] + ["NA"] * 7 + [
                    _fmt(ensemble.col_means[i]),
                    _fmt(ensemble.col_sds[i]),
                    "true",
                    "",
                    ensemble.failures.get(reg.id, "unknown"),
                ]
            else:
                st = fit.state
                row = [
                    reg.id,
                    _fmt(fit.sigma2_g),
                    _fmt(fit.sigma2_e),
                    "inf" if math.isinf(st.delta) else _fmt(st.delta),
                    "inf" if math.isinf(fit.reml_loglik) else _fmt(fit.reml_loglik),
                    "inf" if math.isinf(fit.null_loglik) else _fmt(fit.null_loglik),
                    "NA" if st.h_value is None else _fmt(st.h_value),
                    _fmt(st.kernel_scale),
                    _fmt(ensemble.col_means[i]),
                    _fmt(ensemble.col_sds[i]),
                    "true" if ensemble.flagged[i] else "false",
                    ",".join(sorted(fit.flags)),
                    "",
                ]
            fh.write("\t".join(row) + "\n")

    with open(os.path.join(outdir, WEIGHTS), "w", encoding="utf-8") as fh:
        fh.write("region_id\t" + "\t".join(train.line_ids) + "\n")
        q = train.n_lines
        for i, reg in enumerate(ensemble.regions):
            fit = ensemble.fits[i]
            w = np.zeros(q) if fit is None or fit.state is None else fit.state.weights
            fh.write(reg.id + "\t" + "\t".join(_fmt(v) for v in w) + "\n")

    for i, pcb in enumerate(ensemble.pc_bases):
        if pcb is None or pcb.r == 0:
            continue
        path = os.path.join(outdir, PC_DIR, f"region_{i:04d}.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            heads = "\t".join(f"pc{j + 1}" for j in range(pcb.r))
            fh.write(f"marker_id\tmean\t{heads}\n")
            idx = pcb.column_indices
            for row_i, col in enumerate(idx):
                loads = "\t".join(_fmt(v) for v in pcb.loadings[row_i])
                fh.write(
                    f"{train.marker_ids[col]}\t{_fmt(pcb.col_means[row_i])}\t"
                    f"{loads}\n"
                )

    with open(os.path.join(outdir, COMBINER), "w", encoding="utf-8") as fh:
        fh.write("name\tvalue\n")
        fh.write(f"beta0\t{_fmt(model.beta0)}\n")
        fh.write(f"lambda1\t{_fmt(model.lambda1)}\n")
        fh.write(f"lambda2\t{_fmt(model.lambda2)}\n")
        for rid, a in zip(matrix.region_ids, model.alpha):
            fh.write(f"alpha:{rid}\t{_fmt(a)}\n")
        beta_names = (options or {}).get("covariate_names", [])
        for j, b in enumerate(model.beta):
            name = beta_names[j] if j < len(beta_names) else f"x{j + 1}"
            fh.write(f"beta:{name}\t{_fmt(b)}\n")

    write_importance_table(
        os.path.join(outdir, IMPORTANCE),
        ensemble.regions,
        model.importance,
        gmap,
        train,
    )

    spec = ensemble.kernel_spec
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "kernel": {
            "kind": spec.kind.value,
            "c": spec.c,
            "d": spec.d,
            "h": spec.h if isinstance(spec.h, str) else float(spec.h),
            "gaussian_norm_constant": spec.include_gaussian_norm_constant,
        },
        "coding": train.coding.value,
        "n_lines": train.n_lines,
        "n_markers": train.n_markers,
        "k": len(ensemble.regions),
        "marker_checksum": _marker_checksum(train.marker_ids),
        "options": options or {},
        "inputs": input_checksums or {},
    }
    with open(os.path.join(outdir, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float(s: str) -> float:
    if s == "inf":
        return math.inf
    return float(s)


@dataclass
class PredictorBundle:
    """Loaded model directory, ready to score new marker matrices."""

    ensemble: RegionEnsemble
    model: CombinerModel
    manifest: dict
    hierarchy: object

    def align_new_markers(self, markers_new: MarkerMatrix) -> MarkerMatrix:
        """Reorder new columns to training order; reject set mismatches."""
        train = self.ensemble.train_markers
        if markers_new.marker_ids == train.marker_ids:
            return markers_new
        new_set = set(markers_new.marker_ids)
        train_set = set(train.marker_ids)
        extra = sorted(new_set - train_set)
        missing = sorted(train_set - new_set)
        if extra or missing:
            parts = []
            if extra:
                parts.append(f"unknown markers: {', '.join(extra[:5])}")
            if missing:
                parts.append(f"missing markers: {', '.join(missing[:5])}")
            raise errors.ManifestMismatch(
                "marker set differs from the trained model ("
                + "; ".join(parts)
                + ")"
            )
        idx = markers_new.marker_index()
        perm = [idx[mid] for mid in train.marker_ids]
        return MarkerMatrix(
            line_ids=list(markers_new.line_ids),
            marker_ids=list(train.marker_ids),
            values=markers_new.values[:, perm],
            coding=markers_new.coding,
        )

    def predict(
        self,
        markers_new: MarkerMatrix,
        fixed_new: Optional[FixedEffectTable] = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """(genotypic value, full prediction) per new line."""
        aligned_new = self.align_new_markers(markers_new)
        G_new = local_gebv_for_new(self.ensemble, aligned_new)
        geno = G_new @ self.model.alpha
        full = self.model.beta0 + geno
        p = self.model.beta.shape[0]
        if p:
            if fixed_new is None:
                raise errors.InputError(
                    f"model was fitted with {p} covariates; supply them to "
                    "produce full predictions"
                )
            idx = {l: i for i, l in enumerate(fixed_new.line_ids)}
            missing = [l for l in aligned_new.line_ids if l not in idx]
            if missing:
                raise errors.InputError(
                    f"covariates missing for lines: {missing[:5]}"
                )
            F = np.array([fixed_new.design[idx[l]] for l in aligned_new.line_ids])
            if F.shape[1] != p:
                raise errors.DimensionMismatch(
                    f"covariate table has {F.shape[1]} columns, model needs {p}"
                )
            full = full + F @ self.model.beta
        return geno, full


def load_bundle(path) -> PredictorBundle:
    """Read a model directory back into a scoring-ready object."""
    man_path = os.path.join(path, MANIFEST)
    if not os.path.exists(man_path):
        raise errors.InputError(f"{path} is not a model directory (no manifest)")
    with open(man_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise errors.ManifestMismatch(
            f"unexpected bundle format {manifest.get('format')!r}"
        )
    if manifest.get("format_version") != FORMAT_VERSION:
        raise errors.ManifestMismatch(
            f"bundle format version {manifest.get('format_version')} not supported"
        )

    coding = Coding(manifest.get("coding", Coding.ZERO_ONE_TWO.value))
    train = parse_markers(
        os.path.join(path, MARKERS), format="tsv", coding=coding
    )
    if _marker_checksum(train.marker_ids) != manifest["marker_checksum"]:
        raise errors.ManifestMismatch(
            "stored marker matrix does not match its manifest checksum"
        )
    hierarchy = read_region_file(os.path.join(path, HIERARCHY), train)

    kd = manifest["kernel"]
    spec = KernelSpec(
        kind=KernelKind(kd["kind"]),
        c=float(kd["c"]),
        d=int(kd["d"]),
        h=kd["h"] if kd["h"] == AUTO else float(kd["h"]),
        include_gaussian_norm_constant=bool(kd["gaussian_norm_constant"]),
    )

    region_rows: list[dict] = []
    with open(os.path.join(path, REGIONS), "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            region_rows.append(dict(zip(header, line.rstrip("\n").split("\t"))))

    weights: dict[str, np.ndarray] = {}
    with open(os.path.join(path, WEIGHTS), "r", encoding="utf-8") as fh:
        head = fh.readline().rstrip("\n").split("\t")
        if head[1:] != train.line_ids:
            raise errors.ManifestMismatch(
                "weight columns do not match the stored marker matrix lines"
            )
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            weights[cells[0]] = np.array([float(v) for v in cells[1:]])

    regions: list[Region] = []
    fits: list[Optional[FittedRegionModel]] = []
    col_means, col_sds, flagged = [], [], []
    failures: dict[str, str] = {}
    n = train.n_lines
    for row in region_rows:
        rid = row["region_id"]
        if rid not in hierarchy.regions:
            raise errors.ManifestMismatch(
                f"region {rid!r} in parameters but not in the hierarchy file"
            )
        reg = hierarchy.regions[rid]
        regions.append(reg)
        col_means.append(float(row["col_mean"]))
        col_sds.append(float(row["col_sd"]))
        flagged.append(row["flagged"] == "true")
        if row["sigma2_g"] == "NA":
            fits.append(None)
            failures[rid] = row.get("failure", "") or "unknown"
            continue
        h_val = None if row["h_value"] == "NA" else float(row["h_value"])
        state = SolverState(
            n=n,
            p=0,
            xi=np.zeros(0),
            eta2=np.zeros(0),
            delta=_parse_float(row["delta"]),
            weights=weights[rid],
            h_value=h_val,
            kernel_scale=float(row["kernel_scale"]),
        )
        fits.append(
            FittedRegionModel(
                sigma2_g=float(row["sigma2_g"]),
                sigma2_e=float(row["sigma2_e"]),
                beta_star=np.zeros(0),
                region_id=rid,
                reml_loglik=_parse_float(row["reml_loglik"]),
                null_loglik=_parse_float(row["null_loglik"]),
                ebluphat=np.zeros(0),
                flags=frozenset(
                    f for f in row["flags"].split(",") if f
                ),
                state=state,
            )
        )

    ensemble = RegionEnsemble(
        regions=regions,
        fits=fits,
        pc_bases=[None] * len(regions),
        kernel_spec=spec,
        col_means=np.array(col_means),
        col_sds=np.array(col_sds),
        flagged=np.array(flagged, dtype=bool),
        train_markers=train,
        aligned=None,
        failures=failures,
    )

    alpha: dict[str, float] = {}
    beta_names: list[str] = []
    beta_vals: list[float] = []
    beta0 = 0.0
    lambda1 = lambda2 = 0.0
    with open(os.path.join(path, COMBINER), "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            name, value = line.rstrip("\n").split("\t")
            if name == "beta0":
                beta0 = float(value)
            elif name == "lambda1":
                lambda1 = float(value)
            elif name == "lambda2":
                lambda2 = float(value)
            elif name.startswith("alpha:"):
                alpha[name[len("alpha:") :]] = float(value)
            elif name.startswith("beta:"):
                beta_names.append(name[len("beta:") :])
                beta_vals.append(float(value))
    missing_alpha = [r.id for r in regions if r.id not in alpha]
    if missing_alpha:
        raise errors.ManifestMismatch(
            f"combiner weights missing for regions {missing_alpha[:5]}"
        )
    model = CombinerModel(
        beta0=beta0,
        alpha=np.array([alpha[r.id] for r in regions]),
        beta=np.array(beta_vals),
        lambda1=lambda1,
        lambda2=lambda2,
        region_ids=[r.id for r in regions],
    )
    return PredictorBundle(
        ensemble=ensemble, model=model, manifest=manifest, hierarchy=hierarchy
    )

"""Parsing and validation of genotype matrices, genetic maps, phenotype
tables and fixed-effect covariates.

All readers accept CSV or TSV with a UTF-8 header row. Genotype files carry
line ids in the first column and marker ids in the header; missing genotypes
(default code ``NA``) are imputed to the per-marker mean over observed
values. Phenotype files are long format with columns
``line_id, trait_id, value[, env_id]``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from . import errors


class Coding(Enum):
    """Genotype coding convention. Values are stored as read, never recoded."""

    ZERO_ONE = "zero-one"
    ZERO_ONE_TWO = "zero-one-two"
    MINUS_PLUS = "minus-one-plus-one"


_SEPS = {"csv": ",", "tsv": "\t"}


def _sep(fmt: str) -> str:
    try:
        return _SEPS[fmt]
    except KeyError:
        raise errors.InputError(f"unknown file format {fmt!r}, expected 'csv' or 'tsv'")


@dataclass
class MarkerMatrix:
    """Dense coded genotype matrix, lines in rows, markers in columns."""

    line_ids: list[str]
    marker_ids: list[str]
    values: np.ndarray
    coding: Coding = Coding.ZERO_ONE_TWO
    imputed_fraction: Optional[np.ndarray] = None  # per marker, set by parse_markers

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (len(self.line_ids), len(self.marker_ids)):
            raise errors.DimensionMismatch(
                f"marker matrix shape {self.values.shape} does not match "
                f"{len(self.line_ids)} lines x {len(self.marker_ids)} markers"
            )
        if len(set(self.line_ids)) != len(self.line_ids):
            raise errors.DuplicateLineId("duplicate line ids in marker matrix")
        if len(set(self.marker_ids)) != len(self.marker_ids):
            raise errors.DuplicateMarkerId("duplicate marker ids in marker matrix")

    @property
    def n_lines(self) -> int:
        return self.values.shape[0]

    @property
    def n_markers(self) -> int:
        return self.values.shape[1]

    def line_index(self) -> dict[str, int]:
        return {lid: i for i, lid in enumerate(self.line_ids)}

    def marker_index(self) -> dict[str, int]:
        return {mid: j for j, mid in enumerate(self.marker_ids)}

    def subset_lines(self, line_ids: list[str]) -> "MarkerMatrix":
        idx = self.line_index()
        rows = [idx[l] for l in line_ids]
        return MarkerMatrix(
            line_ids=list(line_ids),
            marker_ids=list(self.marker_ids),
            values=self.values[rows, :],
            coding=self.coding,
        )


class MapUnit(Enum):
    CM = "cM"
    BP = "bp"


@dataclass(frozen=True)
class MapEntry:
    marker_id: str
    chromosome: str
    position: float
    unit: MapUnit = MapUnit.CM


@dataclass
class GeneticMap:
    """Marker positions, sorted by (chromosome, position, marker_id)."""

    entries: list[MapEntry]

    def __post_init__(self):
        self.entries = sorted(
            self.entries, key=lambda e: (e.chromosome, e.position, e.marker_id)
        )
        self._by_marker = {e.marker_id: e for e in self.entries}
        if len(self._by_marker) != len(self.entries):
            raise errors.DuplicateMarkerId("duplicate marker ids in genetic map")

    def __contains__(self, marker_id: str) -> bool:
        return marker_id in self._by_marker

    def __getitem__(self, marker_id: str) -> MapEntry:
        return self._by_marker[marker_id]

    def __len__(self) -> int:
        return len(self.entries)

    def chromosomes(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.chromosome, None)
        return list(seen)

    def unmapped(self, markers: MarkerMatrix) -> list[str]:
        """Marker ids present in the matrix but absent from the map."""
        return [m for m in markers.marker_ids if m not in self._by_marker]


@dataclass(frozen=True)
class PhenotypeRecord:
    line_id: str
    trait_id: str
    value: float
    env_id: Optional[str] = None


@dataclass
class PhenotypeTable:
    records: list[PhenotypeRecord]
    trait_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        keys = set()
        traits: dict[str, None] = {}
        for r in self.records:
            key = (r.line_id, r.trait_id, r.env_id)
            if key in keys:
                raise errors.DuplicatePhenotypeRecord(
                    f"duplicate phenotype record for {key}"
                )
            keys.add(key)
            if not np.isfinite(r.value):
                raise errors.InputError(
                    f"non-finite phenotype value for line {r.line_id!r}, "
                    f"trait {r.trait_id!r}"
                )
            traits.setdefault(r.trait_id, None)
        if not self.trait_ids:
            self.trait_ids = list(traits)

    def for_trait(self, trait_id: str) -> list[PhenotypeRecord]:
        if trait_id not in self.trait_ids:
            raise errors.InputError(
                f"trait {trait_id!r} not present; available: {self.trait_ids}"
            )
        return [r for r in self.records if r.trait_id == trait_id]


@dataclass
class FixedEffectTable:
    """Per-line covariates; expanded to observation level through alignment."""

    line_ids: list[str]
    design: np.ndarray  # n_lines x p
    column_names: list[str]

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        if self.design.shape[0] != len(self.line_ids):
            raise errors.DimensionMismatch("fixed-effect rows do not match line ids")
        if self.design.shape[1] != len(self.column_names):
            raise errors.DimensionMismatch("fixed-effect columns do not match names")
        # full column rank once an intercept is prepended
        n = self.design.shape[0]
        aug = np.hstack([np.ones((n, 1)), self.design])
        if np.linalg.matrix_rank(aug) < aug.shape[1]:
            raise errors.InputError(
                "fixed-effect design is rank deficient after adding an intercept"
            )


@dataclass
class AlignResult:
    """Observation-level response and incidence for one trait.

    ``Z`` is n_obs x n_lines with one 1 per row, mapping each phenotype
    record to its genotyped line. Lines without phenotypes keep a (zero)
    column so they still receive predictions.
    """

    y: np.ndarray
    Z: np.ndarray
    line_order: list[str]
    obs_line_ids: list[str]
    trait_id: str
    n_dropped_phenotypes: int


def parse_markers(
    path,
    format: str = "csv",
    missing_code: str = "NA",
    coding: Coding = Coding.ZERO_ONE_TWO,
    dtype=np.float64,
) -> MarkerMatrix:
    """Read a genotype matrix and impute missing entries to per-marker means.

    Markers that are missing for every line are dropped with a warning;
    if more than half of all markers are dropped this is treated as a
    corrupt file and raised as :class:`errors.AllMissingMarker`.
    """
    sep = _sep(format)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(sep)
    if len(header) < 2:
        raise errors.InputError(f"marker file {path} has no marker columns")
    marker_ids = header[1:]
    if len(set(marker_ids)) != len(marker_ids):
        dupes = sorted({m for m in marker_ids if marker_ids.count(m) > 1})
        raise errors.DuplicateMarkerId(f"duplicate marker ids in header: {dupes[:5]}")

    # rows stream in fixed-size chunks into one preallocated array, so the
    # peak footprint is the matrix itself plus a chunk, not a second copy
    with open(path, "rb") as fh:
        n_rows = sum(1 for _ in fh) - 1
    values = np.empty((max(n_rows, 0), len(marker_ids)), dtype=dtype)
    line_ids: list[str] = []
    try:
        reader = pd.read_csv(
            path,
            sep=sep,
            index_col=0,
            header=None,
            names=["__line__"] + marker_ids,
            dtype={m: dtype for m in marker_ids},
            na_values=[missing_code],
            keep_default_na=False,
            skiprows=1,
            float_precision="round_trip",
            chunksize=256,
        )
        row = 0
        for chunk in reader:
            stop = row + chunk.shape[0]
            if stop > n_rows:
                raise errors.InputError(f"ragged marker file {path}")
            values[row:stop] = chunk.to_numpy(dtype=dtype, copy=False)
            line_ids.extend(str(l) for l in chunk.index)
            row = stop
    except (ValueError, TypeError) as exc:
        raise errors.NonNumericGenotype(
            f"non-numeric genotype in {path}: {exc}"
        ) from None
    values = values[: len(line_ids)]

    if len(set(line_ids)) != len(line_ids):
        dupes = sorted({l for l in line_ids if line_ids.count(l) > 1})
        raise errors.DuplicateLineId(f"duplicate line ids: {dupes[:5]}")
    n_missing = np.isnan(values).sum(axis=0)
    n_lines = values.shape[0]

    all_missing = n_missing == n_lines
    if all_missing.any():
        dropped = [m for m, bad in zip(marker_ids, all_missing) if bad]
        if len(dropped) > 0.5 * len(marker_ids):
            raise errors.AllMissingMarker(
                f"{len(dropped)} of {len(marker_ids)} markers are fully missing"
            )
        warnings.warn(
            f"dropped {len(dropped)} fully missing markers (first: {dropped[:3]})",
            errors.AllMissingMarkerWarning,
        )
        keep = ~all_missing
        values = values[:, keep]
        marker_ids = [m for m, ok in zip(marker_ids, keep) if ok]
        n_missing = n_missing[keep]

    imputed_fraction = (n_missing / n_lines).astype(float)
    if n_missing.any():
        col_means = np.nanmean(values, axis=0)
        nan_r, nan_c = np.nonzero(np.isnan(values))
        values[nan_r, nan_c] = col_means[nan_c]

    return MarkerMatrix(
        line_ids=line_ids,
        marker_ids=list(marker_ids),
        values=values,
        coding=coding,
        imputed_fraction=imputed_fraction,
    )


def write_markers(markers: MarkerMatrix, path, format: str = "csv") -> None:
    sep = _sep(format)
    df = pd.DataFrame(
        markers.values, index=markers.line_ids, columns=markers.marker_ids
    )
    # %.17g keeps enough digits that reparsing restores the exact doubles
    df.to_csv(path, sep=sep, index_label="line_id", float_format="%.17g")


def parse_map(path, format: str = "csv") -> GeneticMap:
    """Read a genetic map: columns marker, chromosome, position[, unit]."""
    sep = _sep(format)
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=sep)
        header = next(reader, None)
        if header is None:
            raise errors.InputError(f"empty map file {path}")
        if not (3 <= len(header) <= 4):
            raise errors.InputError(
                f"map file {path} must have 3 or 4 columns, found {len(header)}"
            )
        for row in reader:
            if not row:
                continue
            marker, chrom, pos_s = row[0], row[1], row[2]
            try:
                pos = float(pos_s)
            except ValueError:
                raise errors.InputError(
                    f"non-numeric position {pos_s!r} for marker {marker!r}"
                ) from None
            if pos < 0:
                raise errors.NegativePosition(
                    f"negative position {pos} for marker {marker!r}"
                )
            unit = MapUnit.CM
            if len(row) >= 4 and row[3]:
                try:
                    unit = MapUnit(row[3])
                except ValueError:
                    raise errors.UnknownUnit(
                        f"unknown unit {row[3]!r} for marker {marker!r}"
                    ) from None
            entries.append(MapEntry(marker, chrom, pos, unit))
    return GeneticMap(entries)


def write_map(gmap: GeneticMap, path, format: str = "csv") -> None:
    sep = _sep(format)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=sep)
        writer.writerow(["marker_id", "chromosome", "position", "unit"])
        for e in gmap.entries:
            writer.writerow([e.marker_id, e.chromosome, repr(e.position), e.unit.value])


def parse_phenotypes(path, format: str = "csv") -> PhenotypeTable:
    """Read a long-format phenotype table: line_id, trait_id, value[, env_id]."""
    sep = _sep(format)
    records = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=sep)
        header = next(reader, None)
        if header is None:
            raise errors.InputError(f"empty phenotype file {path}")
        if len(header) < 3:
            raise errors.InputError(
                f"phenotype file {path} needs columns line_id, trait_id, value"
            )
        for row in reader:
            if not row:
                continue
            try:
                value = float(row[2])
            except ValueError:
                raise errors.InputError(
                    f"non-numeric phenotype {row[2]!r} for line {row[0]!r}"
                ) from None
            env = row[3] if len(row) >= 4 and row[3] else None
            records.append(PhenotypeRecord(row[0], row[1], value, env))
    return PhenotypeTable(records)


def write_phenotypes(phenos: PhenotypeTable, path, format: str = "csv") -> None:
    sep = _sep(format)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=sep)
        writer.writerow(["line_id", "trait_id", "value", "env_id"])
        for r in phenos.records:
            writer.writerow([r.line_id, r.trait_id, repr(r.value), r.env_id or ""])


def parse_fixed_effects(path, format: str = "csv") -> FixedEffectTable:
    """Read per-line covariates: first column line_id, remaining numeric."""
    sep = _sep(format)
    df = pd.read_csv(path, sep=sep, index_col=0)
    try:
        design = df.to_numpy(dtype=float)
    except ValueError as exc:
        raise errors.InputError(f"non-numeric covariate in {path}: {exc}") from None
    return FixedEffectTable(
        line_ids=[str(l) for l in df.index],
        design=design,
        column_names=[str(c) for c in df.columns],
    )


def align(
    markers: MarkerMatrix, phenos: PhenotypeTable, trait: str
) -> AlignResult:
    """Match phenotype records for one trait to genotyped lines.

    Returns the observation vector ``y`` and the 0/1 incidence ``Z`` over
    all genotyped lines (in marker-matrix row order). Phenotyped lines with
    no genotype are dropped and counted.
    """
    records = phenos.for_trait(trait)
    line_idx = markers.line_index()
    kept = [r for r in records if r.line_id in line_idx]
    n_dropped = len(records) - len(kept)
    if len({r.line_id for r in kept}) < 2:
        raise errors.NoOverlap(
            f"only {len({r.line_id for r in kept})} line(s) have both genotypes "
            f"and phenotypes for trait {trait!r}"
        )
    n_obs = len(kept)
    q = markers.n_lines
    y = np.array([r.value for r in kept], dtype=float)
    Z = np.zeros((n_obs, q))
    for i, r in enumerate(kept):
        Z[i, line_idx[r.line_id]] = 1.0
    return AlignResult(
        y=y,
        Z=Z,
        line_order=list(markers.line_ids),
        obs_line_ids=[r.line_id for r in kept],
        trait_id=trait,
        n_dropped_phenotypes=n_dropped,
    )


def expand_fixed_effects(
    fixed: Optional[FixedEffectTable], aligned: AlignResult
) -> tuple[np.ndarray, list[str]]:
    """Observation-level covariate matrix for an aligned trait.

    Returns an empty (n_obs, 0) matrix when no covariates are supplied.
    """
    n_obs = len(aligned.y)
    if fixed is None:
        return np.zeros((n_obs, 0)), []
    idx = {l: i for i, l in enumerate(fixed.line_ids)}
    missing = [l for l in aligned.obs_line_ids if l not in idx]
    if missing:
        raise errors.InputError(
            f"{len(missing)} phenotyped lines missing from fixed-effect table "
            f"(first: {missing[:3]})"
        )
    rows = [idx[l] for l in aligned.obs_line_ids]
    return fixed.design[rows, :], list(fixed.column_names)

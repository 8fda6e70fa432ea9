"""Hierarchical partitioning of mapped markers.

Level 0 is the whole genome, level 1 the chromosomes, and each further
level splits every region into a fixed number of contiguous-by-position
subregions. Unmapped markers never enter a region; they are carried on the
hierarchy so they can still contribute to out-of-region covariates.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from . import errors
from .ingest import GeneticMap, MarkerMatrix


class SplitRule(Enum):
    EQUAL_COUNT = "equal-count"
    EQUAL_LENGTH = "equal-length"


@dataclass
class Region:
    """A contiguous set of marker columns, node of the hierarchy."""

    id: str
    marker_indices: np.ndarray  # column indices, in map order
    level: int
    parent: Optional[str] = None
    children: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.marker_indices = np.asarray(self.marker_indices, dtype=np.intp)
        if self.marker_indices.size == 0:
            raise errors.InputError(f"region {self.id!r} has no markers")

    @property
    def n_markers(self) -> int:
        return int(self.marker_indices.size)

    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class RegionHierarchy:
    regions: dict[str, Region]
    root: str
    leaf_ids: list[str]
    depth: int
    splits_per_level: int
    unmapped_marker_ids: list[str] = field(default_factory=list)

    def __getitem__(self, region_id: str) -> Region:
        return self.regions[region_id]

    def leaves(self) -> list[Region]:
        """Leaf regions in genome order."""
        return [self.regions[i] for i in self.leaf_ids]

    def levels(self) -> dict[int, list[Region]]:
        out: dict[int, list[Region]] = {}
        for rid in self._preorder():
            r = self.regions[rid]
            out.setdefault(r.level, []).append(r)
        return out

    def _preorder(self) -> Iterable[str]:
        stack = [self.root]
        while stack:
            rid = stack.pop()
            yield rid
            stack.extend(reversed(self.regions[rid].children))

    def all_regions(self) -> list[Region]:
        """All regions in preorder (level by construction, genome order within)."""
        return [self.regions[rid] for rid in self._preorder()]

    def validate(self, strict: bool = True) -> None:
        """Check tree consistency; with ``strict`` also require exact partitions."""
        root = self.regions[self.root]
        for r in self.regions.values():
            if r.parent is not None:
                pset = set(self.regions[r.parent].marker_indices.tolist())
                if not set(r.marker_indices.tolist()) <= pset:
                    raise errors.InputError(
                        f"region {r.id!r} is not contained in its parent"
                    )
        if strict:
            for r in self.regions.values():
                if not r.children:
                    continue
                parts = [self.regions[c].marker_indices for c in r.children]
                cat = np.concatenate(parts)
                if len(set(cat.tolist())) != cat.size or set(cat.tolist()) != set(
                    r.marker_indices.tolist()
                ):
                    raise errors.InputError(
                        f"children of {r.id!r} do not partition it"
                    )
            leaf_cat = np.concatenate(
                [self.regions[l].marker_indices for l in self.leaf_ids]
            )
            if set(leaf_cat.tolist()) != set(root.marker_indices.tolist()):
                raise errors.InputError("leaves do not cover the root set")


def _genome_order(gmap: GeneticMap, markers: MarkerMatrix):
    """Mapped marker column indices in (chromosome, position, id) order,
    grouped by chromosome, plus the unmapped ids."""
    col = markers.marker_index()
    per_chrom: dict[str, list[int]] = {}
    mapped = set()
    for e in gmap.entries:  # already sorted
        j = col.get(e.marker_id)
        if j is None:
            continue
        per_chrom.setdefault(e.chromosome, []).append(j)
        mapped.add(e.marker_id)
    for chrom in gmap.chromosomes():
        if chrom not in per_chrom:
            raise errors.EmptyChromosome(
                f"chromosome {chrom!r} has no markers present in the matrix"
            )
    unmapped = [m for m in markers.marker_ids if m not in mapped]
    return per_chrom, unmapped


def _adjust_for_ties(bounds: list[int], pos: np.ndarray) -> list[int]:
    """Move split boundaries off runs of equal positions when possible.

    A boundary inside a tie run moves to the nearer run edge; if that would
    empty a segment the original boundary stands (the run is then split in
    marker-id order, which the genome ordering already fixed).
    """
    out = []
    prev = 0
    n = pos.size
    for i, b in enumerate(bounds):
        nxt = bounds[i + 1] if i + 1 < len(bounds) else n
        if 0 < b < n and pos[b - 1] == pos[b]:
            s = b
            while s > 0 and pos[s - 1] == pos[b]:
                s -= 1
            e = b
            while e < n and pos[e] == pos[b]:
                e += 1
            cand = sorted((s, e), key=lambda c: (abs(c - b), c))
            for c in cand:
                if prev < c < nxt and c < n:
                    b = c
                    break
        b = max(b, prev + 1)
        out.append(b)
        prev = b
    return out


def _split_indices(
    idx: np.ndarray, pos: np.ndarray, splits: int, rule: SplitRule
) -> list[np.ndarray]:
    n = idx.size
    if rule is SplitRule.EQUAL_COUNT:
        base, rem = divmod(n, splits)
        sizes = [base + (1 if i < rem else 0) for i in range(splits)]
        bounds = list(np.cumsum(sizes[:-1]))
        bounds = _adjust_for_ties(bounds, pos)
        cuts = [0] + bounds + [n]
        return [idx[cuts[i] : cuts[i + 1]] for i in range(splits) if cuts[i] < cuts[i + 1]]
    # equal length: split the position span into equal intervals
    lo, hi = float(pos[0]), float(pos[-1])
    if hi == lo:
        return [idx]
    edges = lo + (hi - lo) * np.arange(1, splits) / splits
    seg = np.searchsorted(edges, pos, side="right")
    return [idx[seg == s] for s in range(splits) if (seg == s).any()]


def build_hierarchy(
    gmap: GeneticMap,
    markers: MarkerMatrix,
    depth: int = 2,
    splits: int = 2,
    split_rule: SplitRule | str = SplitRule.EQUAL_COUNT,
) -> RegionHierarchy:
    """Build the nested genome/chromosome/subregion hierarchy.

    ``depth`` counts levels below the root, so depth 1 stops at the
    chromosomes and depth 2 splits each chromosome once. A region too small
    to split stops early with a warning; if no chromosome reaches the
    requested depth the depth is considered infeasible.
    """
    if depth < 1:
        raise errors.InputError(f"depth must be >= 1, got {depth}")
    if splits < 2:
        raise errors.InputError(f"splits must be >= 2, got {splits}")
    rule = SplitRule(split_rule)

    per_chrom, unmapped = _genome_order(gmap, markers)
    if unmapped:
        warnings.warn(
            f"{len(unmapped)} markers missing from the map are excluded from "
            "all regions",
            errors.UnmappedMarkers,
        )

    positions = np.empty(markers.n_markers)
    positions.fill(np.nan)
    col = markers.marker_index()
    for e in gmap.entries:
        j = col.get(e.marker_id)
        if j is not None:
            positions[j] = e.position

    regions: dict[str, Region] = {}
    root_idx = np.concatenate([np.asarray(per_chrom[c]) for c in per_chrom])
    root = Region(id="G", marker_indices=root_idx, level=0)
    regions[root.id] = root

    stopped_early = []
    reached_full_depth = []
    for chrom, cidx in per_chrom.items():
        cid = f"G/{chrom}"
        creg = Region(
            id=cid, marker_indices=np.asarray(cidx), level=1, parent=root.id
        )
        regions[cid] = creg
        root.children.append(cid)

        frontier = [creg]
        degenerate = False
        for level in range(2, depth + 1):
            nxt = []
            for reg in frontier:
                pos = positions[reg.marker_indices]
                if reg.n_markers < splits:
                    degenerate = True
                    continue
                parts = _split_indices(reg.marker_indices, pos, splits, rule)
                if len(parts) < 2:
                    degenerate = True
                    continue
                if len(parts) < splits and rule is SplitRule.EQUAL_LENGTH:
                    warnings.warn(
                        f"empty subregions dropped under {reg.id!r}",
                        errors.DepthTooLarge,
                    )
                for i, part in enumerate(parts, start=1):
                    sub = Region(
                        id=f"{reg.id}/{i}",
                        marker_indices=part,
                        level=level,
                        parent=reg.id,
                    )
                    regions[sub.id] = sub
                    reg.children.append(sub.id)
                    nxt.append(sub)
            frontier = nxt
            if not frontier:
                break
        if degenerate:
            stopped_early.append(chrom)
        if frontier and not degenerate:
            reached_full_depth.append(chrom)

    if stopped_early:
        if depth >= 2 and not reached_full_depth:
            raise errors.InputError(
                f"depth {depth} with {splits} splits is unreachable on every "
                "chromosome"
            )
        warnings.warn(
            f"chromosomes {stopped_early} stopped subdividing before depth "
            f"{depth} (too few markers)",
            errors.DepthTooLarge,
        )

    leaf_ids = [r.id for r in _preorder_regions(regions, root.id) if r.is_leaf()]
    return RegionHierarchy(
        regions=regions,
        root=root.id,
        leaf_ids=leaf_ids,
        depth=depth,
        splits_per_level=splits,
        unmapped_marker_ids=unmapped,
    )


def _preorder_regions(regions: dict[str, Region], root_id: str):
    stack = [root_id]
    while stack:
        rid = stack.pop()
        yield regions[rid]
        stack.extend(reversed(regions[rid].children))


def leaves(hierarchy: RegionHierarchy) -> list[Region]:
    """Leaf regions in genome order."""
    return hierarchy.leaves()


def region_span(
    region: Region, gmap: GeneticMap, markers: MarkerMatrix
) -> tuple[str, float, float]:
    """(chromosome, start, end) of a region; multi-chromosome regions
    (the root) report chromosome '*' and the overall position range."""
    ids = [markers.marker_ids[j] for j in region.marker_indices]
    entries = [gmap[m] for m in ids if m in gmap]
    if not entries:
        return ("*", float("nan"), float("nan"))
    chroms = {e.chromosome for e in entries}
    chrom = entries[0].chromosome if len(chroms) == 1 else "*"
    pos = [e.position for e in entries]
    return (chrom, min(pos), max(pos))


def write_region_file(
    hierarchy: RegionHierarchy, markers: MarkerMatrix, path
) -> None:
    """Serialize a hierarchy as TSV rows (region_id, parent_id, marker_id)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["region_id", "parent_id", "marker_id"])
        for region in hierarchy.all_regions():
            for j in region.marker_indices:
                writer.writerow(
                    [region.id, region.parent or "", markers.marker_ids[j]]
                )


def read_region_file(path, markers: MarkerMatrix) -> RegionHierarchy:
    """Load an explicit region hierarchy from TSV (region_id, parent_id,
    marker_id) rows. Accepts annotation-driven hierarchies that are not
    strict partitions; containment in the parent is still required."""
    col = markers.marker_index()
    members: dict[str, list[int]] = {}
    parent_of: dict[str, Optional[str]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or len(header) < 3:
            raise errors.InputError(f"region file {path} needs 3 columns")
        for row in reader:
            if not row:
                continue
            rid, pid, mid = row[0], row[1] or None, row[2]
            if mid not in col:
                raise errors.InputError(
                    f"region file references unknown marker {mid!r}"
                )
            if rid not in members:
                members[rid] = []
                parent_of[rid] = pid
                order.append(rid)
            elif parent_of[rid] != pid:
                raise errors.InputError(
                    f"region {rid!r} listed with two different parents"
                )
            members[rid].append(col[mid])

    roots = [rid for rid in order if parent_of[rid] is None]
    if len(roots) != 1:
        raise errors.InputError(
            f"region file must have exactly one root region, found {len(roots)}"
        )

    regions: dict[str, Region] = {}
    levels: dict[str, int] = {}

    def level_of(rid: str) -> int:
        if rid in levels:
            return levels[rid]
        pid = parent_of[rid]
        if pid is not None and pid not in members:
            raise errors.InputError(f"region {rid!r} has unknown parent {pid!r}")
        lv = 0 if pid is None else level_of(pid) + 1
        levels[rid] = lv
        return lv

    for rid in order:
        regions[rid] = Region(
            id=rid,
            marker_indices=np.asarray(sorted(set(members[rid]))),
            level=level_of(rid),
            parent=parent_of[rid],
        )
    for rid in order:
        pid = parent_of[rid]
        if pid is not None:
            regions[pid].children.append(rid)

    leaf_ids = [
        r.id for r in _preorder_regions(regions, roots[0]) if r.is_leaf()
    ]
    h = RegionHierarchy(
        regions=regions,
        root=roots[0],
        leaf_ids=leaf_ids,
        depth=max(levels.values()) if levels else 0,
        splits_per_level=0,
        unmapped_marker_ids=[
            m for m in markers.marker_ids if col[m] not in set(regions[roots[0]].marker_indices.tolist())
        ],
    )
    h.validate(strict=False)
    return h

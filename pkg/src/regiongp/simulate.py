"""Synthetic mapped-marker populations with known genetic architecture.

Markers are haploid 0/1, generated per chromosome as a first-order chain
whose adjacent-column correlation is the ld_decay parameter. The genetic
value is a sum of additive marker effects plus declared within-region
product interactions; noise is orthogonalized against the genetic value
and scaled so the realized heritability hits the target exactly in the
sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import errors
from .ingest import (
    Coding,
    GeneticMap,
    MapEntry,
    MarkerMatrix,
    PhenotypeRecord,
    PhenotypeTable,
)
from .partition import SplitRule, build_hierarchy
from .rng import substream

TRAIT_ID = "sim"
FREQ_LO = 0.05
FREQ_HI = 0.95
MAX_RESAMPLE = 200


@dataclass(frozen=True)
class EpistaticPair:
    """One interacting marker pair, indices within a chromosome (0-based)."""

    chromosome: str
    marker_a: int
    marker_b: int
    effect: float


@dataclass
class SimConfig:
    n_lines: int = 500
    n_chrom: int = 3
    markers_per_chrom: int = 30
    ld_decay: float = 0.5
    n_additive_qtl: int = 20
    epistatic_pairs: list[EpistaticPair] = field(default_factory=list)
    h2: float = 0.5
    seed: int = 0
    # the default partition a scenario is meant to be analyzed with
    partition_depth: int = 2
    partition_splits: int = 2

    def __post_init__(self):
        if not (0.0 < self.h2 < 1.0):
            raise errors.InputError(f"h2 must be in (0,1), got {self.h2}")
        if not (0.0 <= self.ld_decay < 1.0):
            raise errors.InputError(
                f"ld_decay must be in [0,1), got {self.ld_decay}"
            )
        if self.n_lines < 2 or self.n_chrom < 1 or self.markers_per_chrom < 2:
            raise errors.InputError("population dimensions too small")
        for pair in self.epistatic_pairs:
            for idx in (pair.marker_a, pair.marker_b):
                if not (0 <= idx < self.markers_per_chrom):
                    raise errors.InputError(
                        f"pair marker index {idx} outside chromosome "
                        f"{pair.chromosome}"
                    )


@dataclass
class SimTruth:
    qtl: list[tuple[str, float]]  # (marker_id, effect)
    pairs: list[tuple[str, str, float]]  # (marker_a, marker_b, effect)
    g_true: np.ndarray
    realized_h2: float
    pair_leaf_ids: list[str]  # leaf of the scenario's default partition


def _marker_id(chrom: str, j: int) -> str:
    return f"c{chrom}m{j + 1:03d}"


def _chain_chromosome(
    rng: np.random.Generator, n: int, m: int, rho: float
) -> np.ndarray:
    """0/1 markers with adjacent-column correlation rho, frequency-bounded."""
    for _ in range(MAX_RESAMPLE):
        x0 = rng.integers(0, 2, size=(n, 1), dtype=np.int16)
        if m > 1:
            flips = (rng.random(size=(n, m - 1)) < (1.0 - rho) / 2.0).astype(
                np.int16
            )
            parity = np.cumsum(flips, axis=1) % 2
            X = np.concatenate([x0, (x0 + parity) % 2], axis=1)
        else:
            X = x0
        freq = X.mean(axis=0)
        if ((freq > FREQ_LO) & (freq < FREQ_HI)).all():
            return X.astype(float)
    raise errors.NumericalError(
        f"could not draw a chromosome with allele frequencies in "
        f"({FREQ_LO}, {FREQ_HI}) after {MAX_RESAMPLE} attempts"
    )


def simulate(
    config: SimConfig,
) -> tuple[MarkerMatrix, GeneticMap, PhenotypeTable, SimTruth]:
    """Draw one population; fully determined by config.seed."""
    n, m = config.n_lines, config.markers_per_chrom
    chrom_names = [str(c + 1) for c in range(config.n_chrom)]
    if config.n_additive_qtl == 0 and not config.epistatic_pairs:
        raise errors.InfeasibleH2(
            "no additive effects and no pairs: genetic variance is zero"
        )

    blocks = []
    for chrom in chrom_names:
        rng_c = substream(config.seed, "markers", chrom)
        blocks.append(_chain_chromosome(rng_c, n, m, config.ld_decay))
    values = np.concatenate(blocks, axis=1)

    line_ids = [f"L{i + 1:04d}" for i in range(n)]
    marker_ids = [
        _marker_id(chrom, j) for chrom in chrom_names for j in range(m)
    ]
    markers = MarkerMatrix(
        line_ids=line_ids,
        marker_ids=marker_ids,
        values=values,
        coding=Coding.ZERO_ONE,
    )
    entries = [
        MapEntry(marker_id=_marker_id(chrom, j), chromosome=chrom, position=float(j))
        for chrom in chrom_names
        for j in range(m)
    ]
    gmap = GeneticMap(entries=entries)

    rng_fx = substream(config.seed, "effects")
    g = np.zeros(n)
    qtl: list[tuple[str, float]] = []
    if config.n_additive_qtl > 0:
        cols = rng_fx.choice(
            values.shape[1], size=min(config.n_additive_qtl, values.shape[1]),
            replace=False,
        )
        effects = rng_fx.standard_normal(cols.size)
        g += values[:, cols] @ effects
        qtl = [(marker_ids[c], float(e)) for c, e in zip(cols, effects)]

    pairs: list[tuple[str, str, float]] = []
    for pair in config.epistatic_pairs:
        if pair.chromosome not in chrom_names:
            raise errors.InputError(
                f"pair chromosome {pair.chromosome!r} not simulated"
            )
        base = chrom_names.index(pair.chromosome) * m
        a, b = base + pair.marker_a, base + pair.marker_b
        g += pair.effect * values[:, a] * values[:, b]
        pairs.append((marker_ids[a], marker_ids[b], float(pair.effect)))

    var_g = float(g.var())
    if var_g <= 0.0:
        raise errors.InfeasibleH2(
            "configured effects produced zero genetic variance"
        )

    rng_e = substream(config.seed, "noise")
    e = rng_e.standard_normal(n)
    # remove the components along the intercept and g, then scale so the
    # realized heritability equals the target exactly in this sample
    e -= e.mean()
    gc = g - g.mean()
    e -= (e @ gc) / (gc @ gc) * gc
    var_e = float(e.var())
    if var_e <= 0.0:
        raise errors.NumericalError("noise vector degenerated to zero variance")
    var_e_target = var_g * (1.0 - config.h2) / config.h2
    e *= math.sqrt(var_e_target / var_e)
    y = g + e

    records = [
        PhenotypeRecord(line_id=line_ids[i], trait_id=TRAIT_ID, value=float(y[i]))
        for i in range(n)
    ]
    phenos = PhenotypeTable(records=records)

    realized = var_g / float(y.var())
    truth = SimTruth(
        qtl=qtl,
        pairs=pairs,
        g_true=g,
        realized_h2=realized,
        pair_leaf_ids=_pair_leaves(config, markers, gmap, pairs),
    )
    return markers, gmap, phenos, truth


def _pair_leaves(
    config: SimConfig,
    markers: MarkerMatrix,
    gmap: GeneticMap,
    pairs: list[tuple[str, str, float]],
) -> list[str]:
    """Leaf of the scenario's default partition holding each pair."""
    if not pairs:
        return []
    hierarchy = build_hierarchy(
        gmap,
        markers,
        depth=config.partition_depth,
        splits=config.partition_splits,
        split_rule=SplitRule.EQUAL_COUNT,
    )
    marker_to_leaf: dict[str, str] = {}
    for leaf in hierarchy.leaves():
        for idx in leaf.marker_indices:
            marker_to_leaf[markers.marker_ids[idx]] = leaf.id
    out = []
    for a, b, _ in pairs:
        leaf_a, leaf_b = marker_to_leaf.get(a), marker_to_leaf.get(b)
        if leaf_a != leaf_b:
            raise errors.InputError(
                f"pair ({a}, {b}) spans leaves {leaf_a} and {leaf_b}; "
                "declared pairs must sit inside one region"
            )
        out.append(leaf_a)
    return out


def scenario_presets() -> dict[str, SimConfig]:
    """Named scenarios used by the desk-scale experiments.

    "local-epistasis" puts all genetic variance in one adjacent marker
    pair inside the first half of chromosome 2 (a mid-genome leaf of the
    default depth-2, split-2 partition). The mixed presets at
    heritability 0.74 and 0.30 mirror the two reported mice trait
    heritabilities.
    """
    base = SimConfig()
    local = replace(
        base,
        n_additive_qtl=0,
        epistatic_pairs=[
            EpistaticPair(chromosome="2", marker_a=6, marker_b=7, effect=1.0)
        ],
    )
    mixed_pairs = [
        EpistaticPair(chromosome="1", marker_a=3, marker_b=4, effect=0.8),
        EpistaticPair(chromosome="3", marker_a=20, marker_b=21, effect=0.8),
    ]
    mixed = replace(base, n_additive_qtl=10, epistatic_pairs=mixed_pairs)
    return {
        "additive-only": replace(base, n_additive_qtl=20),
        "local-epistasis": local,
        "mixed": mixed,
        "mixed-h0.74": replace(mixed, h2=0.74),
        "mixed-h0.30": replace(mixed, h2=0.30),
    }


def preset(name: str, seed: Optional[int] = None) -> SimConfig:
    """One named scenario, optionally reseeded."""
    presets = scenario_presets()
    if name not in presets:
        raise errors.InputError(
            f"unknown preset {name!r}; available: {', '.join(sorted(presets))}"
        )
    cfg = presets[name]
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg

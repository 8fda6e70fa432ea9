"""Region-based kernel mixed models for genomic prediction.

The pipeline has three stages: partition the genome into a nested region
hierarchy, estimate a local genetic value per region with a kernel mixed
model, then combine the standardized local values in a sparse linear
model whose |weight| per region doubles as an importance score. A
hierarchical variance-component test screens regions at controlled
family-wise error, a simulator provides populations with known
architecture, and a cross-validation harness compares the combined model
against whole-genome single-kernel baselines.
"""

__version__ = "0.1.0"

from . import errors
from .combiner import (
    CombinerModel,
    fit_combiner,
    importance_scores,
    predict_full,
    predict_genotypic,
)
from .crossval import CvReport, ModelKind, run_cv, trait_similarity
from .hiertest import RegionTest, TestPlan, hierarchical_test, rlrt_region, assoc_scan
from .ingest import (
    Coding,
    FixedEffectTable,
    GeneticMap,
    MarkerMatrix,
    PhenotypeTable,
    align,
    parse_fixed_effects,
    parse_map,
    parse_markers,
    parse_phenotypes,
)
from .kernels import KernelKind, KernelMatrix, KernelSpec, cross_gram, gram, normalize
from .localvalues import (
    LocalGebvMatrix,
    RegionEnsemble,
    fit_all_regions,
    fit_region_ensemble,
    local_gebv_for_new,
)
from .partition import (
    Region,
    RegionHierarchy,
    SplitRule,
    build_hierarchy,
    read_region_file,
    write_region_file,
)
from .reml import (
    FittedRegionModel,
    PcBasis,
    SpmmProblem,
    eblup,
    fit_reml,
    pca_out_of_region,
    predict_local,
)
from .simulate import EpistaticPair, SimConfig, SimTruth, preset, scenario_presets, simulate

__all__ = [
    "__version__",
    "errors",
    "Coding",
    "MarkerMatrix",
    "GeneticMap",
    "PhenotypeTable",
    "FixedEffectTable",
    "parse_markers",
    "parse_map",
    "parse_phenotypes",
    "parse_fixed_effects",
    "align",
    "Region",
    "RegionHierarchy",
    "SplitRule",
    "build_hierarchy",
    "read_region_file",
    "write_region_file",
    "KernelKind",
    "KernelSpec",
    "KernelMatrix",
    "gram",
    "normalize",
    "cross_gram",
    "SpmmProblem",
    "FittedRegionModel",
    "PcBasis",
    "fit_reml",
    "eblup",
    "predict_local",
    "pca_out_of_region",
    "LocalGebvMatrix",
    "RegionEnsemble",
    "fit_all_regions",
    "fit_region_ensemble",
    "local_gebv_for_new",
    "CombinerModel",
    "fit_combiner",
    "predict_genotypic",
    "predict_full",
    "importance_scores",
    "RegionTest",
    "TestPlan",
    "rlrt_region",
    "hierarchical_test",
    "assoc_scan",
    "SimConfig",
    "SimTruth",
    "EpistaticPair",
    "simulate",
    "scenario_presets",
    "preset",
    "CvReport",
    "ModelKind",
    "run_cv",
    "trait_similarity",
]

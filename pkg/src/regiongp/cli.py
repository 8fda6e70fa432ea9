"""Command-line entry point wiring the pipeline stages together.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure. Options resolve as defaults < config file < command line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__, config, errors
from .bundle import (
    file_checksum,
    load_bundle,
    save_bundle,
    write_importance_table,
)
from .combiner import fit_combiner
from .crossval import run_cv, write_cv_report
from .hiertest import assoc_scan, write_test_table
from .ingest import (
    Coding,
    parse_fixed_effects,
    parse_map,
    parse_markers,
    parse_phenotypes,
    write_map,
    write_markers,
    write_phenotypes,
)
from .kernels import spec_from_options
from .localvalues import fit_region_ensemble
from .partition import SplitRule, build_hierarchy, read_region_file, write_region_file
from .simulate import preset as sim_preset
from .simulate import simulate


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--markers", help="marker matrix file (csv/tsv)")
    p.add_argument("--map", help="genetic map file")
    p.add_argument("--pheno", help="phenotype file (long format)")
    p.add_argument("--fixed", help="fixed-effect covariate file")
    p.add_argument("--trait", help="trait id to analyze")
    p.add_argument("--missing-code", dest="missing_code", help="missing genotype token")
    p.add_argument("--coding", help="genotype coding: zero-one|zero-one-two|minus-one-plus-one")


def _add_partition_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, help="subdivision depth below chromosomes")
    p.add_argument("--splits", type=int, help="children per region per level")
    p.add_argument("--rule", help="split rule: equal-count|equal-length")
    p.add_argument("--region-file", dest="region_file", help="explicit region hierarchy TSV")


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", help="kernel kind: linear|poly|gaussian")
    p.add_argument("--poly-c", dest="poly_c", type=float, help="polynomial offset")
    p.add_argument("--poly-d", dest="poly_d", type=int, help="polynomial degree")
    p.add_argument("--bandwidth", help="Gaussian bandwidth or 'auto'")
    p.add_argument(
        "--gaussian-norm-constant",
        dest="gaussian_norm_constant",
        action="store_const",
        const=True,
        help="include the 1/sqrt(2 pi h) Gaussian factor",
    )


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pc-count", dest="pc_count", type=int, help="out-of-region PCs")
    p.add_argument("--include", help="columns: leaves|all")
    p.add_argument("--lambda1", help="absolute-value penalty or 'auto'")
    p.add_argument("--lambda2", help="squared penalty or 'auto'")
    p.add_argument("--folds", type=int, help="cross-validation folds for auto penalty")


def _add_exec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--threads", type=int, help="worker threads (0 = machine cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regiongp",
        description="Region-based kernel mixed models for genomic prediction",
    )
    parser.add_argument("--version", action="version", version=f"regiongp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build and save a region hierarchy")
    _add_data_flags(p)
    _add_partition_flags(p)
    _add_exec_flags(p)
    p.add_argument("--out", help="output region TSV")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("fit", help="fit the full pipeline, write a model bundle")
    _add_data_flags(p)
    _add_partition_flags(p)
    _add_kernel_flags(p)
    _add_model_flags(p)
    _add_exec_flags(p)
    p.add_argument("--out", help="output model directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="score new lines with a model bundle")
    _add_exec_flags(p)
    p.add_argument("--model", help="model bundle directory")
    p.add_argument("--markers", help="marker matrix of lines to score")
    p.add_argument("--fixed", help="covariates for full predictions")
    p.add_argument("--out", help="output predictions TSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("assoc", help="hierarchical region significance scan")
    _add_data_flags(p)
    _add_partition_flags(p)
    _add_kernel_flags(p)
    _add_exec_flags(p)
    p.add_argument("--pc-count", dest="pc_count", type=int, help="out-of-region PCs")
    p.add_argument("--alpha", type=float, help="family-wise error level")
    p.add_argument("--null-sims", dest="null_sims", type=int, help="null simulations per node")
    p.add_argument("--out", help="output test table TSV")
    p.set_defaults(func=cmd_assoc)

    p = sub.add_parser("cv", help="replicated train/test accuracy comparison")
    _add_data_flags(p)
    _add_partition_flags(p)
    _add_kernel_flags(p)
    _add_model_flags(p)
    _add_exec_flags(p)
    p.add_argument("--models", help="comma list from mk,lin,gaus")
    p.add_argument("--train-frac", dest="train_frac", type=float, help="training fraction")
    p.add_argument("--replicates", type=int, help="number of random splits")
    p.add_argument("--out", help="output report TSV")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("simulate", help="draw a synthetic population")
    _add_exec_flags(p)
    p.add_argument("--preset", help="scenario name (see docs)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("config", help="configuration utilities")
    _add_exec_flags(p)
    p.add_argument(
        "--dump-defaults",
        action="store_true",
        help="print every key at its default value",
    )
    p.set_defaults(func=cmd_config)

    return parser


def _resolve_config(args: argparse.Namespace) -> config.RunConfig:
    file_values = config.parse_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {}
    for f in config.fields(config.RunConfig):
        if hasattr(args, f.name) and getattr(args, f.name) is not None:
            overrides[f.name] = getattr(args, f.name)
    return config.resolve(file_values, overrides)


def _require(cfg: config.RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            flag = "--" + key.replace("_", "-")
            raise errors.InputError(f"missing required option {flag} (config key {key!r})")


def _load_inputs(cfg: config.RunConfig, need_pheno: bool = True):
    markers = parse_markers(
        cfg.markers,
        format=_format_of(cfg.markers),
        missing_code=cfg.missing_code,
        coding=Coding(cfg.coding),
    )
    gmap = parse_map(cfg.map, format=_format_of(cfg.map))
    phenos = fixed = None
    if need_pheno:
        phenos = parse_phenotypes(cfg.pheno, format=_format_of(cfg.pheno))
        if cfg.fixed:
            fixed = parse_fixed_effects(cfg.fixed, format=_format_of(cfg.fixed))
    return markers, gmap, phenos, fixed


def _format_of(path: str) -> str:
    return "tsv" if str(path).endswith((".tsv", ".txt")) else "csv"


def _hierarchy_for(cfg: config.RunConfig, markers, gmap):
    if cfg.region_file:
        return read_region_file(cfg.region_file, markers)
    return build_hierarchy(
        gmap,
        markers,
        depth=cfg.depth,
        splits=cfg.splits,
        split_rule=SplitRule(cfg.rule),
    )


def _input_checksums(cfg: config.RunConfig) -> dict:
    out = {}
    for name in ("markers", "map", "pheno", "fixed", "region_file"):
        path = getattr(cfg, name)
        if path:
            out[name] = {"path": str(path), "blake2b": file_checksum(path)}
    return out


def _write_run_manifest(out_path: str, command: str, cfg: config.RunConfig) -> None:
    data = {
        "command": command,
        "package_version": __version__,
        "seed": cfg.seed,
        "config_hash": config.config_hash(cfg),
        "config": {
            f.name: getattr(cfg, f.name) for f in config.fields(config.RunConfig)
        },
        "inputs": _input_checksums(cfg),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "markers", "map", "out")
    markers, gmap, _, _ = _load_inputs(cfg, need_pheno=False)
    hierarchy = _hierarchy_for(cfg, markers, gmap)
    write_region_file(hierarchy, markers, cfg.out)
    _write_run_manifest(cfg.out, "partition", cfg)
    print(
        f"wrote {len(hierarchy.regions)} regions "
        f"({len(hierarchy.leaf_ids)} leaves) to {cfg.out}"
    )
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "markers", "map", "pheno", "trait", "out")
    markers, gmap, phenos, fixed = _load_inputs(cfg)
    hierarchy = _hierarchy_for(cfg, markers, gmap)
    spec = spec_from_options(
        cfg.kernel, cfg.poly_c, cfg.poly_d, cfg.bandwidth, cfg.gaussian_norm_constant
    )
    ensemble, gmat = fit_region_ensemble(
        markers,
        gmap,
        phenos,
        cfg.trait,
        hierarchy,
        spec,
        r=cfg.pc_count,
        fixed=fixed,
        include=cfg.include,
        threads=cfg.effective_threads(),
    )
    model = fit_combiner(
        gmat,
        fixed,
        ensemble.aligned.y,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        folds=cfg.folds,
    )
    options = {
        "trait": cfg.trait,
        "pc_count": cfg.pc_count,
        "include": cfg.include,
        "lambda1": cfg.lambda1,
        "lambda2": cfg.lambda2,
        "folds": cfg.folds,
        "seed": cfg.seed,
        "covariate_names": list(fixed.column_names) if fixed is not None else [],
        "config_hash": config.config_hash(cfg),
    }
    save_bundle(
        cfg.out,
        ensemble,
        gmat,
        model,
        gmap,
        hierarchy,
        options=options,
        input_checksums=_input_checksums(cfg),
    )
    nz = int(np.count_nonzero(model.alpha))
    print(
        f"fitted {len(ensemble.regions)} regions "
        f"({len(ensemble.failures)} failed), {nz} nonzero weights, "
        f"bundle in {cfg.out}"
    )
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "model", "markers", "out")
    bundle = load_bundle(cfg.model)
    markers_new = parse_markers(
        cfg.markers,
        format=_format_of(cfg.markers),
        missing_code=cfg.missing_code,
        coding=Coding(bundle.manifest.get("coding", cfg.coding)),
    )
    fixed_new = (
        parse_fixed_effects(cfg.fixed, format=_format_of(cfg.fixed))
        if cfg.fixed
        else None
    )
    geno, full = bundle.predict(markers_new, fixed_new)
    with open(cfg.out, "w", encoding="utf-8") as fh:
        fh.write("line_id\tgenotypic_value\tfull_prediction\n")
        for line_id, g, f in zip(markers_new.line_ids, geno, full):
            fh.write(f"{line_id}\t{g:.17g}\t{f:.17g}\n")
    _write_run_manifest(cfg.out, "predict", cfg)
    print(f"wrote predictions for {len(markers_new.line_ids)} lines to {cfg.out}")
    return 0


def cmd_assoc(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "markers", "map", "pheno", "trait", "out")
    markers, gmap, phenos, fixed = _load_inputs(cfg)
    hierarchy = _hierarchy_for(cfg, markers, gmap)
    spec = spec_from_options(
        cfg.kernel, cfg.poly_c, cfg.poly_d, cfg.bandwidth, cfg.gaussian_norm_constant
    )
    tests = assoc_scan(
        markers,
        gmap,
        phenos,
        cfg.trait,
        hierarchy,
        spec,
        r=cfg.pc_count,
        fixed=fixed,
        alpha=cfg.alpha,
        null_sims=cfg.null_sims,
        seed=cfg.seed,
    )
    write_test_table(tests, cfg.out)
    _write_run_manifest(cfg.out, "assoc", cfg)
    n_rej = sum(1 for t in tests if t.rejected)
    print(f"tested {sum(1 for t in tests if t.tested)} regions, {n_rej} rejected")
    return 0


def cmd_cv(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "markers", "map", "pheno", "trait", "out")
    markers, gmap, phenos, fixed = _load_inputs(cfg)
    hierarchy = _hierarchy_for(cfg, markers, gmap)
    spec = spec_from_options(
        cfg.kernel, cfg.poly_c, cfg.poly_d, cfg.bandwidth, cfg.gaussian_norm_constant
    )
    models = [m.strip() for m in cfg.models.split(",") if m.strip()]
    report = run_cv(
        markers,
        gmap,
        phenos,
        cfg.trait,
        hierarchy,
        models=models,
        train_frac=cfg.train_frac,
        replicates=cfg.replicates,
        seed=cfg.seed,
        kernel_spec=spec,
        r=cfg.pc_count,
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        fixed=fixed,
        threads=cfg.effective_threads(),
    )
    write_cv_report(report, cfg.out)
    if report.mean_importance is not None:
        imp_path = os.path.splitext(cfg.out)[0] + ".importance.tsv"
        by_id = {r.id: r for r in hierarchy.all_regions()}
        regions = [by_id[rid] for rid in report.region_ids]
        write_importance_table(
            imp_path, regions, report.mean_importance, gmap, markers
        )
    _write_run_manifest(cfg.out, "cv", cfg)
    for model_name, (mean, sd) in sorted(report.summary().items()):
        print(f"{model_name}: mean accuracy {mean:.4f} (sd {sd:.4f})")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    _require(cfg, "preset", "out")
    sim_cfg = sim_preset(cfg.preset, seed=cfg.seed)
    markers, gmap, phenos, truth = simulate(sim_cfg)
    os.makedirs(cfg.out, exist_ok=True)
    write_markers(markers, os.path.join(cfg.out, "markers.csv"))
    write_map(gmap, os.path.join(cfg.out, "map.csv"))
    write_phenotypes(phenos, os.path.join(cfg.out, "pheno.csv"))
    truth_path = os.path.join(cfg.out, "truth.tsv")
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write("kind\tmarker_a\tmarker_b\teffect\n")
        for mid, eff in truth.qtl:
            fh.write(f"additive\t{mid}\t\t{eff:.17g}\n")
        for ma, mb, eff in truth.pairs:
            fh.write(f"pair\t{ma}\t{mb}\t{eff:.17g}\n")
    _write_run_manifest(os.path.join(cfg.out, "simulated"), "simulate", cfg)
    print(
        f"simulated {markers.n_lines} lines x {markers.n_markers} markers "
        f"(realized h2 {truth.realized_h2:.3f}) in {cfg.out}"
    )
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    if getattr(args, "dump_defaults", False):
        sys.stdout.write(config.dump_defaults())
        return 0
    cfg = _resolve_config(args)
    for f in config.fields(config.RunConfig):
        print(f"{f.name} = {getattr(cfg, f.name)}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    try:
        return args.func(args)
    except errors.InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except errors.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

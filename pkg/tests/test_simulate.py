"""Simulator behavior: determinism, marker statistics, heritability targeting,
epistatic locality, and the named scenario presets."""

import numpy as np
import pytest

from regiongp import errors
from regiongp.partition import build_hierarchy
from regiongp.simulate import (
    FREQ_HI,
    FREQ_LO,
    TRAIT_ID,
    EpistaticPair,
    SimConfig,
    preset,
    scenario_presets,
    simulate,
)


def _small(seed=0, **kw):
    base = dict(
        n_lines=200,
        n_chrom=2,
        markers_per_chrom=12,
        n_additive_qtl=6,
        seed=seed,
    )
    base.update(kw)
    return SimConfig(**base)


class TestReproducibility:
    def test_same_seed_bitwise_identical(self):
        a = simulate(_small(seed=11))
        b = simulate(_small(seed=11))
        assert np.array_equal(a[0].values, b[0].values)
        assert a[0].marker_ids == b[0].marker_ids
        assert a[0].line_ids == b[0].line_ids
        ya = np.array([r.value for r in a[2].records])
        yb = np.array([r.value for r in b[2].records])
        assert np.array_equal(ya, yb)
        assert np.array_equal(a[3].g_true, b[3].g_true)
        assert a[3].qtl == b[3].qtl
        assert a[3].realized_h2 == b[3].realized_h2

    def test_different_seeds_differ(self):
        a = simulate(_small(seed=1))
        b = simulate(_small(seed=2))
        assert not np.array_equal(a[0].values, b[0].values)

    def test_marker_draw_isolated_from_effect_draw(self):
        # changing the number of QTL must not disturb the marker chain
        a = simulate(_small(seed=5, n_additive_qtl=3))
        b = simulate(_small(seed=5, n_additive_qtl=9))
        assert np.array_equal(a[0].values, b[0].values)


class TestMarkerStatistics:
    def test_values_are_binary(self):
        mk, _, _, _ = simulate(_small(seed=3))
        assert set(np.unique(mk.values)) <= {0.0, 1.0}

    @pytest.mark.parametrize("seed", range(5))
    def test_allele_frequency_bounds(self, seed):
        mk, _, _, _ = simulate(_small(seed=seed))
        freq = mk.values.mean(axis=0)
        assert (freq > FREQ_LO).all()
        assert (freq < FREQ_HI).all()

    def test_zero_ld_decay_decorrelates_neighbors(self):
        cfg = SimConfig(
            n_lines=1000,
            n_chrom=1,
            markers_per_chrom=20,
            ld_decay=0.0,
            n_additive_qtl=4,
            seed=7,
        )
        mk, _, _, _ = simulate(cfg)
        X = mk.values
        for j in range(X.shape[1] - 1):
            r = np.corrcoef(X[:, j], X[:, j + 1])[0, 1]
            assert abs(r) < 0.1

    def test_high_ld_decay_correlates_neighbors(self):
        cfg = SimConfig(
            n_lines=1000,
            n_chrom=1,
            markers_per_chrom=20,
            ld_decay=0.9,
            n_additive_qtl=4,
            seed=7,
        )
        mk, _, _, _ = simulate(cfg)
        X = mk.values
        rs = [
            np.corrcoef(X[:, j], X[:, j + 1])[0, 1]
            for j in range(X.shape[1] - 1)
        ]
        assert min(rs) > 0.7

    def test_chain_correlation_tracks_parameter(self):
        cfg = SimConfig(
            n_lines=4000,
            n_chrom=1,
            markers_per_chrom=15,
            ld_decay=0.5,
            n_additive_qtl=4,
            seed=2,
        )
        mk, _, _, _ = simulate(cfg)
        X = mk.values
        rs = [
            np.corrcoef(X[:, j], X[:, j + 1])[0, 1]
            for j in range(X.shape[1] - 1)
        ]
        assert abs(np.mean(rs) - 0.5) < 0.1


class TestOutputStructure:
    def test_shapes_and_ids(self):
        cfg = _small(seed=4)
        mk, gmap, phenos, truth = simulate(cfg)
        n = cfg.n_lines
        q = cfg.n_chrom * cfg.markers_per_chrom
        assert mk.values.shape == (n, q)
        assert mk.line_ids == [f"L{i + 1:04d}" for i in range(n)]
        assert mk.marker_ids[0] == "c1m001"
        assert mk.marker_ids[-1] == f"c2m{cfg.markers_per_chrom:03d}"
        assert len(truth.g_true) == n

    def test_map_equally_spaced(self):
        _, gmap, _, _ = simulate(_small(seed=4))
        by_chrom = {}
        for e in gmap.entries:
            by_chrom.setdefault(e.chromosome, []).append(e.position)
        for positions in by_chrom.values():
            gaps = np.diff(sorted(positions))
            assert np.allclose(gaps, gaps[0])

    def test_phenotypes_use_sim_trait(self):
        _, _, phenos, _ = simulate(_small(seed=4))
        assert {r.trait_id for r in phenos.records} == {TRAIT_ID}
        assert len(phenos.records) == 200


class TestHeritability:
    @pytest.mark.parametrize("h2", [0.2, 0.5, 0.74])
    def test_realized_h2_hits_target(self, h2):
        # noise is rescaled in-sample, so the realized value is exact
        cfg = _small(seed=9, h2=h2)
        _, _, phenos, truth = simulate(cfg)
        assert truth.realized_h2 == pytest.approx(h2, abs=1e-10)
        y = np.array([r.value for r in phenos.records])
        g = truth.g_true
        ratio = g.var() / y.var()
        assert ratio == pytest.approx(h2, abs=1e-10)

    def test_h2_band_at_scale(self):
        cfg = SimConfig(n_lines=1000, h2=0.5, seed=13)
        _, _, _, truth = simulate(cfg)
        assert 0.45 <= truth.realized_h2 <= 0.55

    def test_no_effects_is_infeasible(self):
        cfg = _small(seed=1, n_additive_qtl=0, epistatic_pairs=[])
        with pytest.raises(errors.InfeasibleH2):
            simulate(cfg)


class TestEpistasis:
    def test_pair_contributes_product_term(self):
        pair = EpistaticPair("1", 2, 3, effect=1.5)
        cfg = _small(seed=21, n_additive_qtl=0, epistatic_pairs=[pair])
        mk, _, _, truth = simulate(cfg)
        expected = 1.5 * mk.values[:, 2] * mk.values[:, 3]
        assert np.allclose(truth.g_true, expected)
        assert truth.qtl == []
        assert truth.pairs == [("c1m003", "c1m004", 1.5)]

    def test_pair_leaf_recorded(self):
        pair = EpistaticPair("2", 1, 2, effect=1.0)
        cfg = _small(seed=21, epistatic_pairs=[pair])
        mk, gmap, _, truth = simulate(cfg)
        h = build_hierarchy(
            gmap, mk, depth=cfg.partition_depth, splits=cfg.partition_splits
        )
        assert len(truth.pair_leaf_ids) == 1
        leaf = h.regions[truth.pair_leaf_ids[0]]
        leaf_markers = {mk.marker_ids[i] for i in leaf.marker_indices}
        assert "c2m002" in leaf_markers
        assert "c2m003" in leaf_markers

    def test_pair_spanning_leaves_rejected(self):
        # markers 0 and 11 land in different quarters of a 12-marker
        # chromosome under the default depth-2 split-2 partition
        pair = EpistaticPair("1", 0, 11, effect=1.0)
        cfg = _small(seed=21, epistatic_pairs=[pair])
        with pytest.raises(errors.InputError):
            simulate(cfg)

    def test_pair_and_additive_combine(self):
        pair = EpistaticPair("1", 4, 5, effect=0.8)
        cfg = _small(seed=30, n_additive_qtl=4, epistatic_pairs=[pair])
        mk, _, _, truth = simulate(cfg)
        ids = list(mk.marker_ids)
        g = np.zeros(cfg.n_lines)
        for mid, eff in truth.qtl:
            g += eff * mk.values[:, ids.index(mid)]
        for ma, mb, eff in truth.pairs:
            g += eff * mk.values[:, ids.index(ma)] * mk.values[:, ids.index(mb)]
        assert np.allclose(truth.g_true, g)


class TestConfigValidation:
    @pytest.mark.parametrize("h2", [0.0, 1.0, -0.2, 1.5])
    def test_h2_bounds(self, h2):
        with pytest.raises(errors.InputError):
            _small(h2=h2)

    @pytest.mark.parametrize("ld", [-0.1, 1.0, 2.0])
    def test_ld_decay_bounds(self, ld):
        with pytest.raises(errors.InputError):
            _small(ld_decay=ld)

    def test_tiny_population_rejected(self):
        with pytest.raises(errors.InputError):
            SimConfig(n_lines=1)
        with pytest.raises(errors.InputError):
            SimConfig(markers_per_chrom=1)

    def test_pair_index_out_of_range(self):
        with pytest.raises(errors.InputError):
            _small(epistatic_pairs=[EpistaticPair("1", 0, 12, effect=1.0)])


class TestPresets:
    def test_required_names_present(self):
        presets = scenario_presets()
        for name in (
            "additive-only",
            "local-epistasis",
            "mixed",
            "mixed-h0.74",
            "mixed-h0.30",
        ):
            assert name in presets

    def test_additive_only_has_no_pairs(self):
        cfg = preset("additive-only")
        assert cfg.epistatic_pairs == []
        assert cfg.n_additive_qtl > 0

    def test_local_epistasis_is_pairs_only(self):
        cfg = preset("local-epistasis")
        assert cfg.n_additive_qtl == 0
        assert len(cfg.epistatic_pairs) >= 1
        # all genetic variance must come from the declared pairs
        _, _, _, truth = simulate(cfg)
        assert truth.qtl == []
        assert truth.g_true.var() > 0

    def test_heritability_presets(self):
        assert preset("mixed-h0.74").h2 == 0.74
        assert preset("mixed-h0.30").h2 == 0.30

    def test_presets_all_simulate(self):
        for name in scenario_presets():
            mk, gmap, phenos, truth = simulate(preset(name))
            assert mk.values.shape[0] == len(phenos.records)
            assert 0.0 < truth.realized_h2 < 1.0

    def test_preset_reseed(self):
        a = preset("mixed", seed=101)
        b = preset("mixed", seed=202)
        assert a.seed == 101
        assert b.seed == 202
        assert not np.array_equal(simulate(a)[0].values, simulate(b)[0].values)

    def test_unknown_preset(self):
        with pytest.raises(errors.InputError):
            preset("does-not-exist")

import json
import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from czvar.experiments import (
    CAMPAIGNS,
    FAMILIES,
    QUANTUM,
    CriterionResult,
    ExperimentConfig,
    ExperimentReport,
    generate_corpus,
    hilbert_indicator_exact,
    hilbert_pairs,
    load_baselines,
    quantize,
    resolve_out_dir,
    rho_variation_bruteforce,
    run_campaign,
    run_criterion,
    spike_signals,
    upsample,
)
from czvar.grid import Cube, VectorSignal, cube_at

SMALL = ExperimentConfig(resolution=64, corpus_count=2, weight_resolution=64, weight_p=(2.0,), eps_min=0.25, ladder_m=5)


def brute_variation(a, rho):
    import itertools

    best = 0.0
    for k in range(2, len(a) + 1):
        for idx in itertools.combinations(range(len(a)), k):
            best = max(best, sum(abs(a[j] - a[i]) ** rho for i, j in zip(idx, idx[1:])))
    return best ** (1 / rho)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.domain == Cube.from_bounds([-1.0], 4.0)
        assert cfg.q0 == cube_at(cfg.domain, 2, (1,))
        assert cfg.q0.lower == (0.0,) and cfg.q0.side == 1.0
        lad = cfg.ladder()
        assert lad.eps[0] == 4.0 and lad.eps[-1] == pytest.approx(1 / 16) and len(lad.eps) == 8

    def test_two_dimensional_q0(self):
        cfg = replace(ExperimentConfig(), d=2)
        assert cfg.q0.lower == (0.0, 0.0) and cfg.q0.side == 1.0

    def test_ini_roundtrip(self):
        cfg = replace(ExperimentConfig(), rho=2.5, families=("bump", "spike"), annuli=3, weight_p=(1.5,))
        back = ExperimentConfig.from_ini(cfg.to_ini())
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()

    def test_auto_annuli(self):
        assert ExperimentConfig.from_ini(ExperimentConfig().to_ini()).annuli is None

    def test_fraction_values(self):
        cfg = ExperimentConfig.from_ini("[variation]\neps_min = 1/32\n")
        assert cfg.eps_min == 1 / 32

    def test_hash_sensitive(self):
        a = ExperimentConfig()
        assert a.config_hash() != replace(a, seed=1).config_hash()
        assert len(a.config_hash()) == 16

    @pytest.mark.parametrize("text", ["[grid]\nresolutoin = 8\n", "[extras]\nx = 1\n"])
    def test_unknown_rejected(self, text):
        with pytest.raises(ValueError):
            ExperimentConfig.from_ini(text)

    def test_load(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[corpus]\nseed = 9\n")
        assert ExperimentConfig.load(p).seed == 9


class TestCorpus:
    def test_deterministic(self):
        a, b = generate_corpus(SMALL, count=10), generate_corpus(SMALL, count=10)
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))

    def test_seed_changes(self):
        a, b = generate_corpus(SMALL, seed=0, count=5), generate_corpus(SMALL, seed=1, count=5)
        assert not all(np.array_equal(x.values, y.values) for x, y in zip(a, b))

    def test_size_and_shape(self):
        cfg = ExperimentConfig()
        corpus = generate_corpus(cfg)
        assert len(corpus) == 20
        assert all(f.values.shape == (256, 2) for f in corpus)

    def test_supported_in_q0(self):
        cfg = ExperimentConfig()
        for f in generate_corpus(cfg, count=10):
            outside = ~f.cube_mask(cfg.q0)
            assert not f.values[outside].any()

    def test_quantized(self):
        for f in generate_corpus(SMALL, count=10):
            assert np.array_equal(quantize(f.values), f.values)

    def test_spike_mass(self):
        # spike members carry unit L1 mass per component
        cfg = replace(ExperimentConfig(), families=("spike",))
        for f in generate_corpus(cfg, count=5):
            for s in f.components():
                assert s.l1_norm() == pytest.approx(1.0, abs=1e-4)

    def test_indicator_levels(self):
        cfg = replace(ExperimentConfig(), families=("indicator",))
        for f in generate_corpus(cfg, count=8):
            support = np.abs(f.values).sum(axis=1) > 0
            cells = int(support.sum())
            # dyadic subcube of q0 (64 cells) down to level 6
            assert cells in {64 >> k for k in range(7)}

    def test_refinement_consistent(self):
        coarse = generate_corpus(SMALL, count=5)
        fine = generate_corpus(SMALL, count=5, resolution=128, base_resolution=64)
        for c, f in zip(coarse, fine):
            assert np.array_equal(upsample(c.values, 2, 1), f.values)
            for a, b in zip(c.components(), f.components()):
                assert a.l1_norm() == b.l1_norm()

    def test_bad_base(self):
        with pytest.raises(ValueError):
            generate_corpus(SMALL, resolution=96, base_resolution=64)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            generate_corpus(replace(SMALL, families=("noise",)), count=1)

    def test_families_cycle(self):
        assert FAMILIES == ("indicator", "bump", "signs", "rotation", "spike")

    def test_spike_signals(self):
        cfg = ExperimentConfig()
        sp = spike_signals(cfg, 256)
        assert [s.l1_norm() for s in sp] == [1.0, 1.0, 1.0]
        widths = [int((s.values > 0).sum()) for s in sp]
        assert widths == [16, 4, 1]

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_quantize_idempotent(self, xs):
        q = quantize(np.array(xs))
        assert np.array_equal(quantize(q), q)
        assert np.all(np.abs(q - np.array(xs)) <= QUANTUM / 2)


class TestOracles:
    @pytest.mark.parametrize("rho", [2.5, 3.0, 4.0])
    def test_bruteforce_variation(self, rho):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = rng.normal(size=int(rng.integers(1, 9)))
            assert rho_variation_bruteforce(a, rho) == pytest.approx(brute_variation(a, rho), rel=1e-12, abs=1e-15)

    def test_hilbert_exact_far_field(self):
        # |x| large: T chi ~ 2 / (pi x)
        assert hilbert_indicator_exact(1000.0, 0.25) == pytest.approx(2 / (math.pi * 1000.0), rel=1e-5)

    def test_hilbert_exact_odd(self):
        for x, e in hilbert_pairs():
            assert hilbert_indicator_exact(-x, e) == pytest.approx(-hilbert_indicator_exact(x, e), abs=1e-14)

    def test_hilbert_exact_quadrature(self):
        from scipy.integrate import quad

        for x, e in hilbert_pairs()[:6]:
            pieces = [(-1.0, min(1.0, x - e)), (max(-1.0, x + e), 1.0)]
            val = sum(quad(lambda y: 1 / (math.pi * (x - y)), a, b)[0] for a, b in pieces if b > a)
            assert hilbert_indicator_exact(x, e) == pytest.approx(val, rel=1e-10)

    def test_pairs(self):
        pairs = hilbert_pairs()
        assert len(pairs) == 20
        assert all(abs(abs(x) - 1) > e + 0.05 for x, e in pairs)


class TestReports:
    def test_zero_signal_corpus(self):
        z = [VectorSignal(SMALL.domain, np.zeros((64, 2)))]
        r = run_criterion(8, SMALL, {"c8_weak_sup": 1.0}, corpus=z)
        assert r.passed and r.summary["weak_sup"] == 0.0

    def test_empty_corpus(self):
        r = run_criterion(8, SMALL, {"c8_weak_sup": 1.0}, corpus=[])
        assert r.passed and r.rows == []

    def test_missing_baseline_fails(self):
        r = run_criterion(8, SMALL, {}, corpus=[])
        assert not r.passed and r.summary["baseline"] == "missing"

    def test_error_recorded(self):
        # eps_min below two cell diameters
        r = run_criterion(8, replace(SMALL, eps_min=1 / 16), {"c8_weak_sup": 1.0})
        assert not r.passed and r.error.startswith("TruncationTooFine")

    def test_csv_rerun_identical(self):
        base = {"c8_weak_sup": 100.0}
        a = run_campaign(SMALL, "weaktype", baselines=base)
        b = run_campaign(SMALL, "weaktype", baselines=base)
        assert a.to_csv() == b.to_csv()
        assert a.to_csv().splitlines()[0] == "config_hash,criterion,instance,key,value"

    def test_json_schema(self):
        res = CriterionResult(8, "weak_type", True, {"x": Fraction(1, 3), "y": np.float64(2.0)}, [{"a": 1}])
        body = json.loads(ExperimentReport("h", "weaktype", [res], {"numpy": "x"}).to_json())
        assert body["schema"] == "1.0" and body["passed"] is True
        c = body["criteria"][0]
        assert c["summary"] == {"x": "1/3", "y": 2.0} and c["config_hash"] == "h"

    def test_line(self):
        res = CriterionResult(3, "hilbert_accuracy", False, {"max_rel_err": 0.123456789, "rows": [1]})
        assert res.line() == "[FAIL] criterion 3 (hilbert_accuracy): max_rel_err=0.123457"

    def test_campaigns(self):
        assert CAMPAIGNS["certify"] == tuple(range(1, 11))
        assert sorted(CAMPAIGNS["sparse"] + CAMPAIGNS["weaktype"] + CAMPAIGNS["weighted"]) == [1, 4, 5, 7, 8, 9, 10]

    def test_unknown_campaign(self):
        with pytest.raises(ValueError):
            run_campaign(SMALL, "everything")

    def test_out_dir_precedence(self, monkeypatch):
        monkeypatch.delenv("CZVAR_OUT", raising=False)
        assert str(resolve_out_dir(None, SMALL)) == "czvar-out"
        monkeypatch.setenv("CZVAR_OUT", "/tmp/env")
        assert str(resolve_out_dir(None, SMALL)) == "/tmp/env"
        assert str(resolve_out_dir("/tmp/cli", SMALL)) == "/tmp/cli"

    def test_shipped_baselines(self):
        base = load_baselines()
        assert base["config_hash"] == ExperimentConfig().config_hash()
        assert set(base) >= {"c7_residual_sup", "c7_domination_sup", "c8_weak_sup", "c10_p2_normalized_sup", "c10_p3_normalized_sup"}

    def test_missing_baseline_file(self, tmp_path):
        assert load_baselines(tmp_path / "none.json") == {}

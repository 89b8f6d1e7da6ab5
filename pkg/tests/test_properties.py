import numpy as np
import pytest

from crystal_ebm.crystal import atomic_density
from crystal_ebm.graph import enumerate_edges
from crystal_ebm.model import ModelConfig, init_params
from crystal_ebm.properties import (
    KINDS,
    RedescriptionCase,
    SuiteReport,
    batch_means_se,
    cutoff_crossing_pair,
    gen_redescriptions,
    make_case,
    oracle_pairs,
    random_rotation,
    random_supercell,
    random_unimodular,
    random_unit,
    run_continuity_suite,
    run_gradient_suite,
    run_invariance_suite,
    run_matcher_suite,
    run_sampler_suite,
)

CFG = ModelConfig(node_dim=6, edge_dim=8, conv_layers=2)
PARAMS = init_params(CFG, 5)


class TestGenerators:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_unit(self, seed):
        rng = np.random.default_rng(seed)
        p = random_unit(rng, density=0.05, max_per_species=3)
        assert 1 <= p.n <= 8
        assert atomic_density(p) == pytest.approx(0.05, rel=1e-12)
        assert np.bincount(p.species).max() <= 3
        if p.n > 1:
            assert enumerate_edges(p.coords, p.lattice, 0.4 * 0.05 ** (-1 / 3))[4].size == 0

    def test_impossible_species_limit(self, rng):
        with pytest.raises(ValueError):
            random_unit(rng, n=8, max_species=2, max_per_species=3)

    @pytest.mark.parametrize("proper", [True, False])
    def test_rotation(self, rng, proper):
        q = random_rotation(rng, proper=proper)
        assert np.allclose(q @ q.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(q) == pytest.approx(1.0 if proper else -1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_unimodular_and_supercell(self, seed):
        rng = np.random.default_rng(seed)
        m = random_unimodular(rng)
        assert m.dtype.kind == "i" and round(abs(np.linalg.det(m))) == 1
        s = random_supercell(rng)
        assert round(abs(np.linalg.det(s))) in (2, 4, 8)


class TestRedescriptions:
    def test_identity_first_and_counts(self, rng):
        p = random_unit(rng, n=3)
        cases = gen_redescriptions(p, count=2, seed=1)
        assert cases[0].kind == "identity" and cases[0].transformed is p
        assert len(cases) == 1 + 2 * len(KINDS)

    @pytest.mark.parametrize("seed", range(5))
    def test_supercell_multiplies_atoms(self, seed):
        rng = np.random.default_rng(seed)
        p = random_unit(rng, n_max=4)
        case = make_case(p, "supercell", rng)
        det = round(abs(np.linalg.det(case.matrix)))
        assert case.transformed.n == det * p.n
        assert abs(np.linalg.det(case.transformed.lattice)) == pytest.approx(det * abs(np.linalg.det(p.lattice)))

    @pytest.mark.parametrize("seed", range(5))
    def test_unimodular_preserves_volume(self, seed):
        rng = np.random.default_rng(seed)
        p = random_unit(rng)
        case = make_case(p, "unimodular", rng)
        assert abs(np.linalg.det(case.transformed.lattice)) == pytest.approx(abs(np.linalg.det(p.lattice)), rel=1e-12)
        assert case.transformed.n == p.n

    def test_verify_rejects_a_different_crystal(self, rng):
        p = random_unit(rng, n=3)
        coords = p.coords.copy()
        coords[:, 0] += 0.1
        assert not RedescriptionCase("translation", p, p.replace(coords=coords)).verify()

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            make_case(random_unit(rng), "reflection-ish", rng)


class TestInvarianceSuite:
    def test_passes(self):
        rng = np.random.default_rng(0)
        cases = []
        for k in range(10):
            cases += gen_redescriptions(random_unit(rng, n_max=4), count=1, seed=k)
        report = run_invariance_suite(PARAMS, CFG, cases)
        assert report.passed, report.lines()
        assert {c.name for c in report.checks} >= {f"energy {k}" for k in KINDS}

    def test_detects_non_redescription(self, rng):
        p = random_unit(rng, n=3)
        coords = p.coords.copy()
        coords[:, 0] += 0.3
        fake = RedescriptionCase("translation", p, p.replace(coords=coords))
        assert not run_invariance_suite(PARAMS, CFG, [fake]).passed


class TestContinuitySuite:
    def test_passes(self):
        report = run_continuity_suite(PARAMS, CFG, units=3, directions=4)
        assert report.passed, report.lines()

    def test_envelope_removal_fails(self):
        report = run_continuity_suite(PARAMS, CFG, units=3, directions=4, use_envelope=False)
        jump = next(c for c in report.checks if c.name == "cutoff crossing jump")
        assert not jump.passed

    def test_zero_delta_pair_is_identical(self, rng):
        p = random_unit(rng, n=4)
        inside, outside = cutoff_crossing_pair(p, CFG, 0.0)
        assert np.array_equal(inside.coords, outside.coords)


class TestOtherSuites:
    def test_gradient_suite(self):
        report = run_gradient_suite(PARAMS, CFG, units=2, n_max=3, max_scalars=40)
        assert report.passed, report.lines()

    def test_sampler_suite(self):
        report = run_sampler_suite(samples=20_000, burn_in=500, mh_draws=5_000, params=PARAMS, cfg=CFG)
        assert report.passed, report.lines()
        assert "[sampler]" in report.lines()[0]

    def test_matcher_suite(self):
        report = run_matcher_suite(pairs=10, n_max=4)
        assert report.passed, report.lines()

    def test_oracle_pairs_share_species(self, rng):
        for p, q in oracle_pairs(rng, 10, n_max=4):
            assert sorted(p.species) == sorted(q.species)


class TestReport:
    def test_summary_and_lines(self):
        r = SuiteReport("demo")
        r.add("a", 0.5, True, "<= 1")
        assert r.passed and r.lines()[0].startswith("[demo]")
        r.add("b", 2.0, False, "<= 1")
        assert not r.passed and r.summary()["passed"] is False

    def test_batch_means_se_iid(self, rng):
        x = rng.standard_normal(100_000)
        assert batch_means_se(x) == pytest.approx(1 / np.sqrt(x.size), rel=0.25)

import math

import numpy as np
import pytest
from scipy import stats

from metabias import simlab
from metabias.simlab import MethodResult, ReplicationResult, ScenarioConfig


def rep(index, **methods):
    return ReplicationResult(index, 10, 5, 0, {m: MethodResult(*v) for m, v in methods.items()})


class TestSolveAlphas:
    @pytest.mark.parametrize(
        "anchors,expected",
        [((0.1, 0.99), (-2.18, 0.20)), ((0.3, 0.99), (-1.24, 0.16)), ((0.5, 0.99), (-0.58, 0.13))],
    )
    def test_examples(self, anchors, expected):
        assert simlab.solve_alphas(*anchors) == pytest.approx(expected, abs=5e-3)

    def test_half(self):
        assert simlab.solve_alphas(0.5, 0.5) == (0.0, 0.0)

    def test_reproduces_anchors(self):
        a0, a1 = simlab.solve_alphas(0.23, 0.87)
        assert stats.norm.cdf(a0 + a1 * math.sqrt(20)) == pytest.approx(0.23, rel=1e-12)
        assert stats.norm.cdf(a0 + a1 * math.sqrt(500)) == pytest.approx(0.87, rel=1e-12)

    @pytest.mark.parametrize("p", [(0.0, 0.5), (0.5, 1.0), (-0.1, 0.5)])
    def test_domain(self, p):
        with pytest.raises(ValueError):
            simlab.solve_alphas(*p)


class TestConfig:
    def test_defaults(self):
        c = ScenarioConfig()
        assert c.selection == pytest.approx(simlab.solve_alphas(0.1, 0.99))
        assert c.ci_level == 0.95 and c.theta == -0.25

    def test_alphas_override_anchors(self):
        c = ScenarioConfig(alphas=(-1, 0.1))
        assert c.anchors is None and c.selection == (-1.0, 0.1)

    @pytest.mark.parametrize(
        "kw",
        [dict(rho=1.5), dict(rho=-1.0), dict(tau=-0.1), dict(total_studies=1), dict(replications=0),
         dict(ci_level=1.0), dict(anchors=(0.1, 1.0)), dict(anchors=None), dict(seed=-1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScenarioConfig(**kw)

    def test_from_mapping(self):
        c = ScenarioConfig.from_mapping({"theta": "-0.3", "total": "15", "reps": "20", "p20": "0.3", "p500": "0.99", "level": "0.9"})
        assert (c.theta, c.total_studies, c.replications, c.ci_level) == (-0.3, 15, 20, 0.9)
        assert c.anchors == (0.3, 0.99)
        c = ScenarioConfig.from_mapping({"alpha0": -2.0, "alpha1": 0.2})
        assert c.selection == (-2.0, 0.2)

    @pytest.mark.parametrize(
        "values",
        [{"bogus": 1}, {"alpha0": 1, "alpha1": 0, "p20": 0.3, "p500": 0.9}, {"reps": "2.5"}, {"p20": 0.3}],
    )
    def test_from_mapping_errors(self, values):
        with pytest.raises((ValueError, KeyError)):
            ScenarioConfig.from_mapping(values)

    def test_read_config(self, tmp_path):
        p = tmp_path / "s.cfg"
        p.write_text("# scenario\ntheta = -0.25\ntau=0.3  # heterogeneity\n\nrho = -0.8\np20 = 0.1\np500 = 0.99\ntotal = 15\nreps = 3\nseed = 5\n")
        c = simlab.read_config(p)
        assert (c.tau, c.rho, c.total_studies, c.replications, c.seed) == (0.3, -0.8, 15, 3, 5)

    @pytest.mark.parametrize("text,match", [("theta -0.2\n", "key = value"), ("tau = 1\ntau = 2\n", "duplicate"), ("rho = 1.5\n", "rho")])
    def test_read_config_errors(self, tmp_path, text, match):
        p = tmp_path / "bad.cfg"
        p.write_text(text)
        with pytest.raises(ValueError, match=match):
            simlab.read_config(p)


class TestRng:
    def test_streams_repeat_and_differ(self):
        a = simlab.RngStream(3, 1).generator().random(5)
        b = simlab.RngStream(3, 1).generator().random(5)
        c = simlab.RngStream(3, 2).generator().random(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestGeneration:
    def test_sample_size_floor(self):
        gen = np.random.default_rng(1)
        draws = np.array([simlab._draw_n(gen) for _ in range(100_000)])
        assert draws.min() == 20
        p = stats.norm.cdf(math.log(20.5) - 5.0)
        se = math.sqrt(p * (1 - p) / draws.size)
        assert np.mean(draws == 20) == pytest.approx(p, abs=4 * se)

    def test_study_fields(self):
        gen = np.random.default_rng(2)
        cfg = ScenarioConfig()
        for _ in range(500):
            s = simlab.gen_study(cfg, gen)
            assert s.n >= 20 and s.total_trt + s.total_ctl == s.n
            assert 0 < s.total_trt < s.n
            assert 0 <= s.events_trt <= s.total_trt and 0 <= s.events_ctl <= s.total_ctl
            assert s.published == (s.y_latent > 0) and s.sei > 0
            assert 0.2 <= s.p_ctl <= 0.9

    def test_stream_determinism(self):
        cfg = ScenarioConfig()
        assert simlab.gen_study(cfg, simlab.RngStream(9, 4)) == simlab.gen_study(cfg, simlab.RngStream(9, 4))
        a = simlab.gen_meta(cfg, simlab.RngStream(9, 4))
        b = simlab.gen_meta(cfg, simlab.RngStream(9, 4))
        assert a.studies == b.studies

    def test_independence_at_rho_zero(self):
        gen = np.random.default_rng(3)
        y = gen.normal(-0.25, 0.3, 100_000)
        latent = simlab.draw_selection(y, -0.25, 0.0, 0.3, 0.4, 0.0, gen)
        assert abs(np.corrcoef(latent - 0.4, y)[0, 1]) < 0.01

    @pytest.mark.parametrize("tau,rho", [(0.0, -0.8), (0.0, 0.5), (0.2, -0.8)])
    def test_joint_law_correlation(self, tau, rho):
        gen = np.random.default_rng(4)
        sigma, theta, u = 0.3, -0.25, 0.4
        V = tau ** 2 + sigma ** 2
        y = gen.normal(theta, math.sqrt(V), 100_000)
        latent = simlab.draw_selection(y, theta, tau, sigma, u, rho, gen)
        assert np.mean(latent) == pytest.approx(u, abs=0.01)
        assert np.std(latent) == pytest.approx(1.0, abs=0.01)
        assert np.corrcoef(latent, y)[0, 1] == pytest.approx(rho * sigma / math.sqrt(V), abs=0.01)

    @pytest.mark.parametrize("anchors,target", [((0.1, 0.99), 0.40), ((0.3, 0.99), 0.27), ((0.5, 0.99), 0.19)])
    def test_unpublished_fraction(self, anchors, target):
        cfg = ScenarioConfig(anchors=anchors, rho=-0.8, tau=0.05)
        gen = np.random.default_rng(5)
        frac = np.mean([not simlab.gen_study(cfg, gen).published for _ in range(10_000)])
        assert frac == pytest.approx(target, abs=0.03)

    def test_selection_bias_direction(self):
        cfg = ScenarioConfig(rho=-0.8)
        gen = np.random.default_rng(6)
        studies = [simlab.gen_study(cfg, gen) for _ in range(10_000)]
        pub = np.mean([s.yi for s in studies if s.published])
        unpub = np.mean([s.yi for s in studies if not s.published])
        assert pub < cfg.theta < unpub

    def test_meta_layout(self):
        cfg = ScenarioConfig(total_studies=30)
        d = simlab.gen_meta(cfg, np.random.default_rng(7))
        assert len(d.studies) == 30 and d.n_published >= 2
        flags = [s.published for s in d.studies]
        assert flags == sorted(flags, reverse=True)
        assert all(s.yi is None and s.n >= 20 for s in d.unpublished)

    def test_regeneration_counted(self):
        cfg = ScenarioConfig(alphas=(-1.5, 0.0), rho=0.0, total_studies=3)
        d, redraws = simlab._gen_meta(cfg, np.random.default_rng(8))
        assert d.n_published >= 2 and redraws > 0


class TestSummarize:
    def test_single(self):
        s = simlab.summarize([rep(0, REML=(-0.25, -0.3, -0.2, True))], -0.25)["REML"]
        assert s.ave == -0.25 and s.cp == 1.0 and s.noc == 1
        assert s.loci == pytest.approx(0.1)
        assert math.isnan(s.sd)

    def test_symmetric_pair(self):
        s = simlab.summarize([rep(0, REML=(-0.35, -0.4, -0.3, True)), rep(1, REML=(-0.15, -0.2, -0.1, True))], -0.25)["REML"]
        assert s.ave == pytest.approx(-0.25, abs=1e-15)
        assert s.sd == pytest.approx(math.sqrt(0.02), rel=1e-12)
        assert s.cp == 0.0

    def test_excludes_non_converged(self):
        rs = [rep(0, REML=(-0.2, -0.3, -0.1, True)), rep(1, REML=(9.0, 8.0, 10.0, False))]
        s = simlab.summarize(rs, -0.25)
        assert s["REML"].noc == 1 and s["REML"].ave == -0.2

    def test_absent_method(self):
        s = simlab.summarize([rep(0, REML=(0, 0, 0, False))], 0.0, methods=["REML", "Copas"])
        assert s["REML"] is None and s["Copas"] is None

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        rs = []
        for i in range(50):
            e = rng.normal(-0.25, 0.1)
            rs.append(rep(i, REML=(e, e - 0.1, e + 0.1, bool(rng.random() > 0.1))))
        a = simlab.summarize(rs, -0.25)
        b = simlab.summarize(list(reversed(rs)), -0.25)
        c = simlab.summarize([rs[i] for i in rng.permutation(50)], -0.25)
        assert a.as_dict() == b.as_dict() == c.as_dict()


class TestWorkers:
    def test_cap(self, monkeypatch):
        monkeypatch.setenv(simlab.THREADS_ENV, "2")
        assert simlab.worker_cap(8) == 2 and simlab.worker_cap(1) == 1
        monkeypatch.delenv(simlab.THREADS_ENV)
        assert simlab.worker_cap(8) == 8

    @pytest.mark.parametrize("bad", ["0", "x"])
    def test_bad_env(self, monkeypatch, bad):
        monkeypatch.setenv(simlab.THREADS_ENV, bad)
        with pytest.raises(ValueError):
            simlab.worker_cap(2)


class TestScenario:
    cfg = ScenarioConfig(total_studies=25, replications=12, seed=31)
    methods = ("REML", "REML.KnHa", "MLE(N)", "MLE(T)", "MLE(SE#)")

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            simlab.run_scenario(self.cfg, methods=("OLS",))

    def test_parallel_matches_serial(self, monkeypatch):
        monkeypatch.delenv(simlab.THREADS_ENV, raising=False)
        a = simlab.run_scenario(self.cfg, self.methods, workers=1)
        b = simlab.run_scenario(self.cfg, self.methods, workers=3)
        assert a.as_dict() == b.as_dict()
        assert a.replications == 12 and a.config == self.cfg
        for m in self.methods:
            s = a[m]
            assert 0 <= s.cp <= 1 and s.noc <= 12

    def test_replication_with_copas(self):
        r = simlab.run_replication(self.cfg, 0)
        assert set(r.results) == set(simlab.METHODS)
        assert r.n_published + r.n_unpublished == 25

    @pytest.mark.slow
    def test_no_selection_coverage(self):
        cfg = ScenarioConfig(rho=0.0, alphas=(5.0, 0.0), total_studies=30, replications=1000, seed=44)
        s = simlab.run_scenario(cfg, ("REML",), workers=1)["REML"]
        assert s.cp == pytest.approx(0.95, abs=0.02)
        assert s.ave == pytest.approx(-0.25, abs=0.01)

    @pytest.mark.slow
    def test_mle_less_biased_than_reml(self):
        cfg = ScenarioConfig(total_studies=100, replications=500, seed=45, rho=-0.8, tau=0.15)
        s = simlab.run_scenario(cfg, ("REML", "MLE(N)"), workers=1)
        assert abs(s["MLE(N)"].ave - cfg.theta) < abs(s["REML"].ave - cfg.theta)

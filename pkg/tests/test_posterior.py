"""Per-variant posterior inference via SIR resampling."""

import numpy as np
import pytest

import oracles
from mrpath.mcem import e_step
from mrpath.model import MixtureParams, SnpRecord, SummaryDataset
from mrpath.posterior import sir_resample, summarize_posterior, summarize_posteriors
from mrpath.simulate import preset_config, simulate_dataset


class TestSirResample:
    def test_degenerate_prior_concentrates(self):
        params = MixtureParams([1.0], [0.25], [1e-9], 0.0, 1.0)
        record = SnpRecord("rs1", 0.3, 0.05, 0.08, 0.05)
        states = sir_resample(record, params, m=2000, n_out=500, seed=1)
        betas = np.array([s.beta for s in states])
        assert np.all(np.abs(betas - 0.25) < 1e-3)
        assert all(s.cluster == 1 for s in states)

    def test_resampled_mean_matches_is_mean(self, two_cluster_params):
        record = SnpRecord("rs1", 0.15, 0.03, 0.04, 0.03)
        m, n_out = 40_000, 20_000
        states = sir_resample(record, two_cluster_params, m=m, n_out=n_out, seed=3)
        resampled = np.mean([s.beta for s in states])
        sample = e_step(
            SummaryDataset([record]), two_cluster_params, m, seed=3, purpose="sir"
        )
        is_mean = float(np.sum(sample.norm_weights[0] * sample.beta[0]))
        se = oracles.weighted_is_se(sample.norm_weights[0], sample.beta[0])
        # Resampling noise adds ~sd/sqrt(n_out); allow both sources.
        sd = float(np.std([s.beta for s in states]))
        assert abs(resampled - is_mean) < 3 * (se + sd / np.sqrt(n_out))

    def test_membership_matches_grid_oracle(self, two_cluster_params):
        record = SnpRecord("rs1", 0.12, 0.04, 0.03, 0.04)
        states = sir_resample(record, two_cluster_params, m=100_000, n_out=50_000, seed=5)
        frac2 = np.mean([s.cluster == 2 for s in states])
        grid = oracles.grid_joint_posterior(record, two_cluster_params, n=600)
        assert abs(frac2 - grid["membership"][1]) < 0.01

    def test_warns_when_nout_exceeds_m(self, two_cluster_params, caplog):
        record = SnpRecord("rs1", 0.1, 0.05, 0.05, 0.05)
        with caplog.at_level("WARNING"):
            sir_resample(record, two_cluster_params, m=200, n_out=300, seed=1)
        assert any("n_out" in r.message for r in caplog.records)

    def test_equal_weights_resamples_uniformly(self):
        # sigma_k -> huge makes all weights essentially equal after
        # normalization; the resampler proceeds with a diagnostic.
        params = MixtureParams([1.0], [0.0], [1e8], 0.0, 1.0)
        record = SnpRecord("rs1", 0.0, 1e-6, 0.0, 1.0)
        states = sir_resample(record, params, m=1000, n_out=500, seed=2)
        assert len(states) == 500

    def test_deterministic(self, two_cluster_params):
        record = SnpRecord("rs1", 0.2, 0.05, 0.1, 0.05)
        a = sir_resample(record, two_cluster_params, m=1000, n_out=100, seed=9)
        b = sir_resample(record, two_cluster_params, m=1000, n_out=100, seed=9)
        assert [s.beta for s in a] == [s.beta for s in b]

    @pytest.mark.slow
    def test_sir_distribution_ks_against_grid(self):
        rng = np.random.default_rng(17)
        from conftest import random_params

        for trial in range(10):
            params = random_params(rng, k=2)
            record = SnpRecord(
                "rs1",
                rng.uniform(-0.6, 0.6),
                rng.uniform(0.02, 0.1),
                rng.uniform(-0.4, 0.4),
                rng.uniform(0.02, 0.1),
            )
            states = sir_resample(record, params, m=100_000, n_out=10_000, seed=trial)
            betas = np.sort([s.beta for s in states])
            grid = oracles.grid_joint_posterior(record, params, n=900)
            cdf = np.interp(betas, grid["beta_grid"], grid["beta_cdf"])
            empirical = np.arange(1, betas.size + 1) / betas.size
            ks = np.max(np.abs(cdf - empirical))
            assert ks < 0.02, f"trial {trial}: KS {ks:.4f}"


class TestSummaries:
    def test_symmetric_snp_splits_membership(self):
        params = MixtureParams([0.5, 0.5], [-0.5, 0.5], [0.01, 0.01], 0.0, 1.0)
        record = SnpRecord("rs1", 0.5, 0.005, 0.0, 0.01)  # ratio exactly 0
        summary = summarize_posterior(record, params, m=30_000, n_out=5000, seed=3)
        assert summary.membership_probs[0] == pytest.approx(0.5, abs=0.02)
        assert summary.membership_probs[1] == pytest.approx(0.5, abs=0.02)

    def test_membership_sums_to_one_and_ci_orders(self, two_cluster_params):
        sim = simulate_dataset(preset_config("sim1-k2", p=12, seed=3))
        summaries = summarize_posteriors(
            sim.dataset, two_cluster_params, m=5000, n_out=1000, seed=4
        )
        assert len(summaries) == 12
        for s in summaries:
            assert s.membership_probs.sum() == pytest.approx(1.0, abs=1e-10)
            lo, hi = s.beta_ci
            assert lo <= s.beta_median <= hi
            assert s.assigned_cluster in (1, 2)
            assert s.n_resamples == 1000

    def test_wellseparated_assignment_accuracy(self):
        sim = simulate_dataset(preset_config("sim1-k2", p=120, seed=8))
        summaries = summarize_posteriors(
            sim.dataset, sim.params_true, m=4000, n_out=800, seed=5
        )
        truth = np.array([t.cluster for t in sim.truth])
        assigned = np.array([s.assigned_cluster for s in summaries])
        assert np.mean(assigned == truth) >= 0.95

    def test_membership_stable_under_m_doubling(self, two_cluster_params):
        record = SnpRecord("rs1", 0.1, 0.03, 0.02, 0.03)
        a = summarize_posterior(record, two_cluster_params, m=20_000, seed=1)
        b = summarize_posterior(record, two_cluster_params, m=40_000, seed=2)
        # Within 3 MC SEs; membership MC error at these sizes is < 0.01.
        assert np.all(np.abs(a.membership_probs - b.membership_probs) < 0.03)

    @pytest.mark.slow
    def test_credible_interval_calibration(self):
        # 95% credible intervals should cover the true simulated beta_i for
        # 93-97% of SNPs across replications.
        covered = 0
        total = 0
        for rep in range(25):
            sim = simulate_dataset(preset_config("sim1-k2", p=40, seed=600 + rep))
            summaries = summarize_posteriors(
                sim.dataset, sim.params_true, level=0.95,
                m=4000, n_out=1500, seed=rep,
            )
            for s, t in zip(summaries, sim.truth):
                lo, hi = s.beta_ci
                covered += lo <= t.beta <= hi
                total += 1
        rate = covered / total
        assert 0.93 <= rate <= 0.97, rate

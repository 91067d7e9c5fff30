import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgsan.synth import (
    SynthConfig,
    base_coherence,
    community_labels,
    generate,
    mean_difference_statistic,
    planted_truth,
    recovery_score,
)

SMALL = SynthConfig(
    n_regions=10,
    feature_dim=5,
    timesteps=3,
    samples_per_class=4,
    informative_regions=(1, 6),
    community_count=2,
    seed=3,
)


class TestConfig:
    def test_defaults_valid(self):
        SynthConfig().validate()

    def test_informative_out_of_range(self):
        cfg = SynthConfig(n_regions=10, informative_regions=(3, 12))
        with pytest.raises(ValueError, match="out of range"):
            cfg.validate()

    def test_duplicate_informative(self):
        cfg = SynthConfig(informative_regions=(2, 2, 5))
        with pytest.raises(ValueError, match="distinct"):
            cfg.validate()

    def test_generate_rejects_bad_config(self):
        with pytest.raises(ValueError):
            generate(SynthConfig(samples_per_class=0))


class TestPlantedTruth:
    def test_round_trip(self):
        cfg = SynthConfig(informative_regions=(2, 7, 11))
        assert planted_truth(cfg) == {2, 7, 11}

    def test_empty(self):
        assert planted_truth(SynthConfig(informative_regions=())) == frozenset()

    def test_recovery_of_truth_is_one(self):
        truth = planted_truth(SMALL)
        assert recovery_score(truth, truth) == 1.0

    def test_recovery_partial(self):
        assert recovery_score([1, 2, 3], [1, 6]) == 0.5

    def test_recovery_empty_truth(self):
        assert recovery_score([1], []) == 1.0


class TestGenerate:
    def test_deterministic_bitwise(self):
        a = generate(SMALL)
        b = generate(SMALL)
        for ga, gb in zip(a, b):
            assert np.array_equal(ga.node_features, gb.node_features)
            assert np.array_equal(ga.connectivity, gb.connectivity)
            assert ga.label == gb.label

    def test_label_balance_exact(self):
        graphs = generate(SMALL)
        labels = [g.label for g in graphs]
        assert len(graphs) == 8
        assert sum(labels) == 4

    @given(seed=st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=25)
    def test_invariants_for_all_seeds(self, seed):
        cfg = SynthConfig(
            n_regions=8,
            feature_dim=3,
            timesteps=2,
            samples_per_class=1,
            informative_regions=(0, 4),
            community_count=2,
            seed=seed,
        )
        for i, g in enumerate(generate(cfg)):
            g.validate(i)

    def test_no_signal_distributions_match(self):
        cfg = SynthConfig(
            samples_per_class=150, signal_strength=0.0, seed=9, n_regions=12,
            feature_dim=6, timesteps=2, informative_regions=(2, 5), community_count=2,
        )
        graphs = generate(cfg)
        stat = mean_difference_statistic(graphs)
        # all regions indistinguishable: the statistic stays at noise level
        assert stat.max() < 0.5

    def test_mean_difference_maximal_on_planted(self):
        cfg = SynthConfig(seed=4)
        graphs = generate(cfg)
        stat = mean_difference_statistic(graphs)
        top5 = set(np.argsort(-stat)[:5].tolist())
        assert top5 == planted_truth(cfg)

    def test_connectivity_shared_across_classes(self):
        cfg = SynthConfig(seed=5)
        base = base_coherence(cfg)
        graphs = generate(cfg)
        for g in graphs[:4]:
            mean = g.connectivity.mean(axis=0)
            off = ~np.eye(cfg.n_regions, dtype=bool)
            assert np.abs(mean - base)[off].max() < 0.2

    def test_informative_regions_have_no_strong_links(self):
        cfg = SynthConfig(seed=0)
        base = base_coherence(cfg)
        for r in cfg.informative_regions:
            row = np.delete(base[r], r)
            assert row.max() < 0.4

    def test_community_structure_ordering(self):
        cfg = SynthConfig(seed=0)
        base = base_coherence(cfg)
        comm = community_labels(cfg)
        off = ~np.eye(cfg.n_regions, dtype=bool)
        same = (comm[:, None] == comm[None, :]) & off
        cross = (comm[:, None] != comm[None, :]) & off
        assert base[same].mean() > base[cross].mean()

    def test_linear_probe_monotone_in_signal(self):
        def probe_accuracy(signal, seed):
            cfg = SynthConfig(
                samples_per_class=60,
                signal_strength=signal,
                seed=seed,
                n_regions=16,
                feature_dim=8,
                timesteps=2,
                informative_regions=(1, 5, 9),
                community_count=2,
            )
            graphs = generate(cfg)
            labels = np.array([g.label for g in graphs])
            feats = np.stack([g.node_features.ravel() for g in graphs])
            idx = np.random.default_rng(seed).permutation(len(graphs))
            tr, te = idx[:60], idx[60:]
            mu1 = feats[tr][labels[tr] == 1].mean(axis=0)
            mu0 = feats[tr][labels[tr] == 0].mean(axis=0)
            w = mu1 - mu0
            b = -0.5 * (mu1 + mu0) @ w
            pred = (feats[te] @ w + b > 0).astype(int)
            return float((pred == labels[te]).mean())

        levels = [0.0, 1.0, 2.0, 4.0]
        means = [np.mean([probe_accuracy(s, k) for k in (0, 1, 2)]) for s in levels]
        for lo, hi in zip(means, means[1:]):
            assert hi >= lo - 0.02
        assert means[0] < 0.7 and means[-1] > 0.95

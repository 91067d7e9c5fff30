import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgsan.graphdata import (
    DatasetFormatError,
    DynamicBrainGraph,
    aggregate_dynamic,
    build_view,
    export_features_csv,
    load_dataset,
    read_sidecar,
    save_dataset,
    shortest_path_buckets,
    threshold_adjacency,
)
from fgsan.synth import SynthConfig, generate


def make_graph(rng, n=6, d=3, t=2, label=0):
    conn = np.empty((t, n, n))
    for k in range(t):
        m = rng.uniform(0.0, 1.0, size=(n, n))
        m = (m + m.T) / 2.0
        np.fill_diagonal(m, 1.0)
        conn[k] = m
    return DynamicBrainGraph(
        node_features=rng.standard_normal((n, d)), connectivity=conn, label=label
    )


class TestAggregate:
    def test_singleton_identity(self, rng):
        g = make_graph(rng, t=1)
        assert np.array_equal(aggregate_dynamic(g.connectivity), g.connectivity[0])

    def test_two_matrix_mean(self):
        a = np.full((3, 3), 0.2)
        b = np.full((3, 3), 0.6)
        for m in (a, b):
            np.fill_diagonal(m, 1.0)
        out = aggregate_dynamic(np.stack([a, b]))
        assert out[0, 1] == pytest.approx(0.4)

    def test_matches_bruteforce(self, rng):
        g = make_graph(rng, t=3)
        expect = sum(g.connectivity[k] for k in range(3)) / 3.0
        assert np.allclose(aggregate_dynamic(g.connectivity), expect, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_dynamic(np.zeros((0, 3, 3)))


class TestThreshold:
    def test_no_edges_leaves_self_loops(self):
        coh = np.zeros((4, 4))
        np.fill_diagonal(coh, 1.0)
        adj = threshold_adjacency(coh, 0.5)
        assert np.array_equal(adj, np.eye(4, dtype=bool))

    def test_threshold_boundary(self):
        coh = np.zeros((3, 3))
        np.fill_diagonal(coh, 1.0)
        coh[1, 2] = coh[2, 1] = 0.5
        assert threshold_adjacency(coh, 0.4)[1, 2]
        assert not threshold_adjacency(coh, 0.6)[1, 2]

    def test_matches_elementwise_oracle(self, rng):
        coh = rng.uniform(size=(6, 6))
        coh = (coh + coh.T) / 2.0
        np.fill_diagonal(coh, 1.0)
        adj = threshold_adjacency(coh, 0.4)
        for i in range(6):
            for j in range(6):
                expect = True if i == j else coh[i, j] >= 0.4
                assert adj[i, j] == expect

    def test_tau_out_of_range(self):
        with pytest.raises(ValueError):
            threshold_adjacency(np.eye(3), 1.5)

    @given(
        tau1=st.floats(min_value=0.05, max_value=0.95),
        tau2=st.floats(min_value=0.05, max_value=0.95),
        seed=st.integers(min_value=0, max_value=50),
    )
    def test_monotone_in_tau(self, tau1, tau2, seed):
        if tau1 > tau2:
            tau1, tau2 = tau2, tau1
        r = np.random.default_rng(seed)
        coh = r.uniform(size=(5, 5))
        coh = (coh + coh.T) / 2.0
        np.fill_diagonal(coh, 1.0)
        loose = threshold_adjacency(coh, tau1)
        tight = threshold_adjacency(coh, tau2)
        assert np.all(loose | ~tight)


class TestShortestPaths:
    def test_path_graph(self):
        adj = np.eye(3, dtype=bool)
        adj[0, 1] = adj[1, 0] = True
        adj[1, 2] = adj[2, 1] = True
        d = shortest_path_buckets(adj, 5)
        assert d[0, 2] == 2
        assert d[0, 1] == 1

    def test_diagonal_zero(self, rng):
        g = make_graph(rng)
        adj = threshold_adjacency(aggregate_dynamic(g.connectivity), 0.4)
        d = shortest_path_buckets(adj, 5)
        assert np.all(np.diagonal(d) == 0)

    def test_disconnected_components_get_max_bucket(self):
        adj = np.eye(4, dtype=bool)
        adj[0, 1] = adj[1, 0] = True
        adj[2, 3] = adj[3, 2] = True
        d = shortest_path_buckets(adj, 5)
        assert np.all(d[:2, 2:] == 5)
        assert np.all(d[2:, :2] == 5)

    def test_clipping(self):
        n = 9
        adj = np.eye(n, dtype=bool)
        for i in range(n - 1):
            adj[i, i + 1] = adj[i + 1, i] = True
        d = shortest_path_buckets(adj, 4)
        assert d[0, 3] == 3
        assert d[0, 4] == 4  # distance 4 exceeds max_bucket - 1
        assert d[0, 8] == 4

    def test_symmetric(self, rng):
        g = make_graph(rng, n=8)
        adj = threshold_adjacency(aggregate_dynamic(g.connectivity), 0.5)
        d = shortest_path_buckets(adj, 5)
        assert np.array_equal(d, d.T)

    @given(seed=st.integers(min_value=0, max_value=100))
    def test_triangle_inequality_on_unclipped(self, seed):
        r = np.random.default_rng(seed)
        n = 7
        adj = r.uniform(size=(n, n)) < 0.3
        adj |= adj.T
        np.fill_diagonal(adj, True)
        d = shortest_path_buckets(adj, 6)
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    if d[i, j] < 6 and d[j, k] < 6 and d[i, k] < 6:
                        assert d[i, k] <= d[i, j] + d[j, k]

    @given(seed=st.integers(min_value=0, max_value=60))
    def test_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        n = 8
        adj = r.uniform(size=(n, n)) < 0.35
        adj |= adj.T
        np.fill_diagonal(adj, True)
        d = shortest_path_buckets(adj, 5)
        p = r.permutation(n)
        dp = shortest_path_buckets(adj[np.ix_(p, p)], 5)
        assert np.array_equal(dp, d[np.ix_(p, p)])


class TestValidation:
    def test_label_outside_binary(self, rng):
        g = make_graph(rng)
        bad = DynamicBrainGraph(g.node_features, g.connectivity, label=2)
        with pytest.raises(DatasetFormatError, match="label"):
            bad.validate(0)

    def test_asymmetric_rejected(self, rng):
        g = make_graph(rng)
        conn = g.connectivity.copy()
        conn[0, 1, 2] += 0.05
        bad = DynamicBrainGraph(g.node_features, conn, g.label)
        with pytest.raises(DatasetFormatError, match="sample 3.*asymmetric"):
            bad.validate(3)

    def test_out_of_range_rejected(self, rng):
        g = make_graph(rng)
        conn = g.connectivity.copy()
        conn[0, 1, 2] = conn[0, 2, 1] = 1.5
        bad = DynamicBrainGraph(g.node_features, conn, g.label)
        with pytest.raises(DatasetFormatError, match="outside"):
            bad.validate()


class TestDatasetIO:
    def test_round_trip_bitwise(self, tmp_path, rng):
        graphs = [make_graph(rng, label=i % 2) for i in range(4)]
        path = tmp_path / "ds.bin"
        save_dataset(path, graphs, region_names=[f"r{i}" for i in range(6)])
        loaded = load_dataset(path)
        assert len(loaded) == 4
        for orig, back in zip(graphs, loaded):
            assert np.array_equal(orig.node_features, back.node_features)
            assert np.array_equal(orig.connectivity, back.connectivity)
            assert orig.label == back.label

    def test_sidecar_header(self, tmp_path, rng):
        graphs = [make_graph(rng)]
        path = tmp_path / "ds.bin"
        save_dataset(path, graphs, planted_regions=[2, 0])
        header = read_sidecar(path)
        assert header["N"] == 6 and header["D"] == 3 and header["T"] == 2
        assert header["sample_count"] == 1
        assert header["planted_regions"] == [0, 2]

    def test_truncated_file_rejected(self, tmp_path, rng):
        graphs = [make_graph(rng) for _ in range(2)]
        path = tmp_path / "ds.bin"
        save_dataset(path, graphs)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(DatasetFormatError, match="corrupt"):
            load_dataset(path)

    def test_asymmetric_sample_named_on_load(self, tmp_path, rng):
        graphs = [make_graph(rng) for _ in range(3)]
        path = tmp_path / "ds.bin"
        save_dataset(path, graphs)
        raw = np.fromfile(path, dtype="<f8")
        record = 1 + 6 * 3 + 2 * 6 * 6
        raw[2 * record + 1 + 18 + 1] += 0.25  # off-diagonal entry of sample 2
        raw.tofile(path)
        with pytest.raises(DatasetFormatError, match="sample 2"):
            load_dataset(path)

    def test_bad_label_on_load(self, tmp_path, rng):
        graphs = [make_graph(rng)]
        path = tmp_path / "ds.bin"
        save_dataset(path, graphs)
        raw = np.fromfile(path, dtype="<f8")
        raw[0] = 3.0
        raw.tofile(path)
        with pytest.raises(DatasetFormatError, match="label"):
            load_dataset(path)

    def test_missing_sidecar(self, tmp_path, rng):
        path = tmp_path / "ds.bin"
        save_dataset(path, [make_graph(rng)])
        (tmp_path / "ds.bin.json").unlink()
        with pytest.raises(DatasetFormatError, match="sidecar"):
            load_dataset(path)

    def test_generated_dataset_round_trip(self, tmp_path):
        config = SynthConfig(
            n_regions=8,
            feature_dim=4,
            timesteps=3,
            samples_per_class=3,
            informative_regions=(1, 5),
            community_count=2,
            seed=11,
        )
        graphs = generate(config)
        path = tmp_path / "synth.bin"
        save_dataset(path, graphs)
        loaded = load_dataset(path)
        for orig, back in zip(graphs, loaded):
            assert np.array_equal(orig.node_features, back.node_features)
            assert np.array_equal(orig.connectivity, back.connectivity)

    def test_features_csv(self, tmp_path, rng):
        graphs = [make_graph(rng) for _ in range(2)]
        path = tmp_path / "features.csv"
        export_features_csv(path, graphs)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("sample,label,region,f0")
        assert len(lines) == 1 + 2 * 6


class TestBuildView:
    def test_view_shapes_and_self_loops(self, rng):
        g = make_graph(rng, n=7)
        view = build_view(g, tau=0.4, max_bucket=5)
        assert view.adjacency.shape == (7, 7)
        assert np.all(np.diagonal(view.adjacency))
        assert np.all(np.diagonal(view.spd_bucket) == 0)
        assert view.spd_bucket.max() <= 5

"""Topological similarity, template graph construction and 2-hop mini-batches."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from test_losses import brute_force_topological
from topocalib.datagen import DatasetManifest, ViewSample
from topocalib.graph import (
    TemplateGraph,
    build_graph,
    enumerate_candidate_links,
    pairwise_similarity,
    sample_minibatch,
    similarity_score,
)
from topocalib.losses import LossConfig
from topocalib.scene import encode_onehot

CFG = LossConfig()


def exhaustive_graph(manifest, k, cfg):
    """Score every (node, dictionary) pair with the brute-force loss and sort by (score, id)."""
    ids = [s.id for s in manifest.samples]
    dict_ids = [s.id for s in manifest.samples if s.split == "dictionary"]
    out = {}
    for s in manifest.samples:
        a = encode_onehot(s.image, 4, np.float64)
        cand = []
        for d in manifest.samples:
            if d.split != "dictionary" or d.id == s.id:
                continue
            b = encode_onehot(d.image, 4, np.float64)
            cand.append((brute_force_topological(a, b, cfg.alpha, cfg.beta, cfg.patches_per_side), d.id))
        cand.sort()
        out[s.id] = cand[:k]
    assert set(dict_ids) <= set(ids)
    return out


def sub_manifest(manifest, n):
    return DatasetManifest(manifest.scene_id, manifest.meters_per_pixel, manifest.out_size, manifest.samples[:n])


class TestSimilarity:
    def test_self_similarity_is_zero(self, tiny_manifest):
        x = tiny_manifest.samples[0].image
        assert similarity_score(x, x) == 0.0

    def test_symmetric(self, tiny_manifest):
        a, b = tiny_manifest.samples[0].image, tiny_manifest.samples[1].image
        assert similarity_score(a, b) == similarity_score(b, a)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.integers(0, 4, (64, 64)), rng.integers(0, 4, (64, 64))
        want = brute_force_topological(encode_onehot(a, 4, np.float64), encode_onehot(b, 4, np.float64), 0.5, 0.01, 8)
        assert abs(similarity_score(a, b) - want) / want < 1e-9

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            similarity_score(np.zeros((8, 8), int), np.zeros((8, 16), int))

    def test_pairwise_matches_single_scores(self, tiny_manifest):
        imgs = tiny_manifest.images()[:12]
        S = pairwise_similarity(imgs[:5], imgs, LossConfig(), 4, block=2)
        for i in range(5):
            for j in range(12):
                assert abs(S[i, j] - similarity_score(imgs[i], imgs[j])) < 1e-12


class TestBuildGraph:
    def test_matches_exhaustive_oracle(self, tiny_manifest):
        man = sub_manifest(tiny_manifest, 30)
        graph = build_graph(man, k=5, cfg=CFG)
        want = exhaustive_graph(man, 5, CFG)
        for i, node in enumerate(graph.ids):
            got_ids = [graph.ids[j] for j in graph.neighbors[i]]
            assert got_ids == [d for _, d in want[node]]
            np.testing.assert_allclose(graph.scores[i], [s for s, _ in want[node]], rtol=1e-12, atol=0)

    def test_invariants(self, tiny_graph):
        dmask = tiny_graph.dictionary_mask
        assert tiny_graph.neighbors.shape == (len(tiny_graph.ids), tiny_graph.k)
        assert dmask[tiny_graph.neighbors].all()
        assert np.isfinite(tiny_graph.scores).all() and (tiny_graph.scores >= 0).all()
        assert (np.diff(tiny_graph.scores, axis=1) >= 0).all()
        for i, row in enumerate(tiny_graph.neighbors):
            assert i not in row and len(set(row.tolist())) == tiny_graph.k

    def test_duplicate_template_is_top_edge(self, tiny_manifest):
        query, d0, d1, d2 = tiny_manifest.samples[:4]
        dup = ViewSample("d_dup", d1.H_gt, d1.camera, "dictionary", image=query.image.copy())
        samples = [
            ViewSample("q", query.H_gt, query.camera, "train", image=query.image),
            ViewSample("d_a", d0.H_gt, d0.camera, "dictionary", image=d0.image),
            dup,
            ViewSample("d_c", d2.H_gt, d2.camera, "dictionary", image=d2.image),
        ]
        man = DatasetManifest("s", 1.0, (64, 64), samples)
        graph = build_graph(man, k=2, cfg=CFG)
        assert graph.ids[graph.neighbors[0, 0]] == "d_dup" and graph.scores[0, 0] == 0.0

    def test_order_independent(self, tiny_manifest):
        man = sub_manifest(tiny_manifest, 30)
        perm = np.random.default_rng(1).permutation(30)
        shuffled = DatasetManifest("s", 1.0, man.out_size, [man.samples[i] for i in perm])
        a, b = build_graph(man, 5, CFG), build_graph(shuffled, 5, CFG)
        ea = {(s, d) for s, d, _ in a.edges()}
        eb = {(s, d) for s, d, _ in b.edges()}
        assert ea == eb

    def test_k_too_large(self, tiny_manifest):
        n_dict = tiny_manifest.split_counts()["dictionary"]
        with pytest.raises(ValueError):
            build_graph(tiny_manifest, k=n_dict + 1, cfg=CFG)

    def test_empty_dictionary(self, tiny_manifest):
        samples = [s for s in tiny_manifest.samples if s.split != "dictionary"]
        with pytest.raises(ValueError):
            build_graph(DatasetManifest("s", 1.0, (64, 64), samples), k=1)

    def test_cache_round_trip(self, tiny_manifest, tmp_path):
        a = build_graph(tiny_manifest, 5, CFG, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("sim_*.npy"))) == 1
        b = build_graph(tiny_manifest, 5, CFG, cache_dir=tmp_path)
        np.testing.assert_array_equal(a.neighbors, b.neighbors)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_save_load(self, tiny_graph, tmp_path):
        tiny_graph.save(tmp_path)
        header = (tmp_path / "edges.csv").read_text().splitlines()[0]
        assert header == "src_id,dst_id,score"
        back = TemplateGraph.load(tmp_path)
        assert back.ids == tiny_graph.ids and back.splits == tiny_graph.splits and back.k == tiny_graph.k
        np.testing.assert_array_equal(back.neighbors, tiny_graph.neighbors)
        np.testing.assert_array_equal(back.scores, tiny_graph.scores)
        assert back.meta["manifest_hash"] == tiny_graph.meta["manifest_hash"]


class TestMiniBatch:
    def test_thousand_batches(self, tiny_graph):
        rng = np.random.default_rng(0)
        train = tiny_graph.nodes_in("train")
        dmask = tiny_graph.dictionary_mask
        edges = tiny_graph.edge_set()
        for b in range(1000):
            seeds = rng.choice(train, size=int(rng.integers(1, 6)), replace=False)
            batch = sample_minibatch(tiny_graph, seeds, (3, 2), rng_seed=b)
            assert dmask[batch.hop1].all() and dmask[batch.hop2].all()
            pairs, labels = enumerate_candidate_links(batch, tiny_graph)
            assert len(pairs) == len(seeds) * len(batch.dictionary_nodes)
            for (s, d), y in zip(pairs, labels):
                assert y == ((int(s), int(d)) in edges)

    def test_hop_sizes(self, tiny_graph):
        seeds = tiny_graph.nodes_in("train")[:4]
        batch = sample_minibatch(tiny_graph, seeds, (3, 2), rng_seed=1)
        for s, nb in zip(seeds, batch.seed_neighbors):
            assert len(nb) == 3 and set(nb.tolist()) <= set(tiny_graph.neighbors[s].tolist())
        assert not set(batch.hop2.tolist()) & set(batch.hop1.tolist())
        assert len(set(batch.nodes.tolist())) == len(batch.nodes)

    def test_fanout_above_k_takes_all(self, tiny_graph):
        s = tiny_graph.nodes_in("train")[0]
        batch = sample_minibatch(tiny_graph, [s], (50, 1), rng_seed=0)
        assert sorted(batch.hop1.tolist()) == sorted(tiny_graph.neighbors[s].tolist())
        _, labels = enumerate_candidate_links(batch, tiny_graph)
        assert labels.sum() == min(50, tiny_graph.k)

    def test_deterministic(self, tiny_graph):
        seeds = tiny_graph.nodes_in("test")[:3]
        a = sample_minibatch(tiny_graph, seeds, (3, 2), rng_seed=5)
        b = sample_minibatch(tiny_graph, seeds, (3, 2), rng_seed=5)
        np.testing.assert_array_equal(a.nodes, b.nodes)

    def test_ids_accepted(self, tiny_graph):
        s = tiny_graph.nodes_in("train")[:2]
        a = sample_minibatch(tiny_graph, s, rng_seed=3)
        b = sample_minibatch(tiny_graph, [tiny_graph.ids[i] for i in s], rng_seed=3)
        np.testing.assert_array_equal(a.nodes, b.nodes)

    def test_mixed_splits_rejected(self, tiny_graph):
        seeds = [tiny_graph.nodes_in("train")[0], tiny_graph.nodes_in("test")[0]]
        with pytest.raises(ValueError):
            sample_minibatch(tiny_graph, seeds)
        with pytest.raises(ValueError):
            sample_minibatch(tiny_graph, tiny_graph.nodes_in("dictionary")[:1])

    def test_bad_fanout(self, tiny_graph):
        with pytest.raises(ValueError):
            sample_minibatch(tiny_graph, tiny_graph.nodes_in("train")[:1], (0, 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_positives_negatives_partition(self, tiny_graph, f1, f2, seed):
        seeds = tiny_graph.nodes_in("train")[:3]
        batch = sample_minibatch(tiny_graph, seeds, (f1, f2), rng_seed=seed)
        pairs, labels = enumerate_candidate_links(batch, tiny_graph)
        pos = int(labels.sum())
        assert pos + int((labels == 0).sum()) == len(pairs)
        assert pos >= sum(len(nb) for nb in batch.seed_neighbors)

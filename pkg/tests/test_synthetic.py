import json

import numpy as np
import pytest

from textssm import synthetic as syn
from textssm.grounding import labels_to_segments


@pytest.fixture(scope="module")
def corpus():
    return syn.gen_corpus(syn.SyntheticConfig(items=1000))


@pytest.fixture(scope="module")
def small():
    return syn.gen_corpus(syn.SyntheticConfig(items=24, L=128))


class TestMotifs:
    def test_distinguishable(self, corpus):
        motifs, _ = corpus
        for a in motifs:
            for b in motifs:
                if a is not b:
                    assert syn.param_distance(a, b) > 1.0

    def test_need_two(self):
        with pytest.raises(ValueError):
            syn.make_motifs(1, 8, 3, 256, np.random.default_rng(0))

    def test_waveform_support(self, corpus):
        m = corpus[0][0]
        w = m.waveform(30, 8)
        off = [v for v in range(8) if v not in m.node_subset]
        assert w.shape == (8, 30, 3)
        assert np.all(w[off] == 0)
        assert np.all(np.abs(w) <= max(np.abs(m.amplitude)) + 1e-12)


class TestItems:
    def test_labels_match_segments(self, corpus):
        for it in corpus[1][:200]:
            assert labels_to_segments(it.labels) == it.segments

    def test_target_count_and_distractors(self, corpus):
        for it in corpus[1]:
            assert 1 <= len(it.segments) <= 4
            assert it.distractors
            assert all(mid != it.query_id for mid, _ in it.distractors)

    def test_intervals_disjoint(self, corpus):
        for it in corpus[1][:200]:
            segs = sorted(it.segments + [s for _, s in it.distractors])
            for a, b in zip(segs, segs[1:]):
                assert a.end <= b.start

    def test_grounded_ratio(self, corpus):
        r = np.mean([syn.grounded_ratio(it) for it in corpus[1]])
        assert 0.12 <= r <= 0.18

    def test_matched_filter_recovers_labels(self, corpus):
        motifs, items = corpus
        assert syn.matched_filter_accuracy(items[:300], motifs, threshold=0.3, window=13) > 0.95

    def test_packing_infeasible(self):
        with pytest.raises(ValueError, match="cannot pack"):
            syn._pack([30, 30], 50, np.random.default_rng(0))

    def test_max_len(self):
        with pytest.raises(ValueError):
            syn.gen_corpus(syn.SyntheticConfig(L=300, max_len=256, items=1))


class TestDeterminism:
    def test_same_seed(self, small):
        again = syn.gen_corpus(syn.SyntheticConfig(items=24, L=128))
        assert again[0] == small[0] and again[1] == small[1]

    def test_other_seed_differs(self, small):
        other = syn.gen_corpus(syn.SyntheticConfig(items=24, L=128, seed=1))
        assert other[1] != small[1]

    def test_worker_count_irrelevant(self, small):
        par = syn.gen_corpus(syn.SyntheticConfig(items=24, L=128), workers=3)
        assert par[1] == small[1]


class TestSplit:
    def test_partition(self, small):
        items = small[1]
        tr, va = syn.split(items, (0.75, 0.25), seed=3)
        ids = [id(x) for x in tr + va]
        assert len(ids) == len(set(ids)) == len(items)

    def test_deterministic(self, small):
        a = syn.split(small[1], seed=4)
        b = syn.split(small[1], seed=4)
        assert [id(x) for x in a[0]] == [id(x) for x in b[0]]

    def test_bad_fractions(self, small):
        with pytest.raises(ValueError):
            syn.split(small[1], (0.5, 0.4))


class TestQueryEmbedding:
    def test_unit_and_deterministic(self):
        e = syn.QueryEmbeddingProvider(6, 16, seed=2)
        np.testing.assert_allclose(np.linalg.norm(e.table, axis=1), 1.0, atol=1e-14)
        np.testing.assert_array_equal(e([1, 3]), syn.QueryEmbeddingProvider(6, 16, seed=2)([1, 3]))
        assert not np.array_equal(e.table, syn.QueryEmbeddingProvider(6, 16, seed=3).table)


class TestJsonl:
    def test_round_trip(self, small, tmp_path):
        motifs, items = small
        path = tmp_path / "c.jsonl"
        syn.write_jsonl(items, path, motifs)
        assert syn.read_jsonl(path) == items
        assert syn.read_motifs(str(path) + ".motifs.json") == motifs

    def test_malformed_line_named(self, small, tmp_path):
        path = tmp_path / "c.jsonl"
        syn.write_jsonl(small[1][:2], path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(ValueError, match="line 3"):
            syn.read_jsonl(path)

    def test_inconsistent_labels(self, small, tmp_path):
        obj = syn.item_to_json(small[1][0])
        obj["labels"] = [0] * len(obj["labels"])
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(ValueError, match="line 1"):
            syn.read_jsonl(path)

import numpy as np
import pytest

from tripletrank.data import (
    Dataset,
    NegativeKind,
    RelevanceSource,
    Triplet,
    load_dataset,
    load_relevance,
    save_dataset,
    save_relevance,
)


def make_dataset(n, shape=(1, 4, 4), categories=None, latents=None, seed=0):
    rng = np.random.default_rng(seed)
    cats = categories if categories is not None else [0] * n
    return Dataset(shape, list(range(n)), cats, rng.random((n,) + shape, dtype=np.float32),
                   latents)


class TestDataset:
    def test_lookup_by_id(self, tiny_dataset):
        assert tiny_dataset.category(3) == 1
        assert tiny_dataset.tensor(2).shape == (1, 4, 4)
        assert tiny_dataset.ids_in_category(0) == [0, 1, 2]
        assert tiny_dataset.categories == [0, 1]

    def test_unknown_id(self, tiny_dataset):
        with pytest.raises(KeyError, match="99"):
            tiny_dataset.tensor(99)

    def test_duplicate_id_rejected(self):
        with pytest.raises(ValueError, match="duplicate image id 1"):
            Dataset((1, 2, 2), [0, 1, 1], [0, 0, 0],
                    np.zeros((3, 1, 2, 2), dtype=np.float32))

    def test_out_of_range_values_rejected(self):
        tensors = np.zeros((2, 1, 2, 2), dtype=np.float32)
        tensors[1, 0, 0, 0] = 1.5
        with pytest.raises(ValueError, match="image id 1"):
            Dataset((1, 2, 2), [0, 1], [0, 0], tensors)

    def test_non_finite_rejected(self):
        tensors = np.zeros((1, 1, 2, 2), dtype=np.float32)
        tensors[0, 0, 1, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            Dataset((1, 2, 2), [0], [0], tensors)

    def test_missing_latents(self):
        ds = make_dataset(2)
        with pytest.raises(ValueError, match="no latents"):
            ds.latent(0)


class TestTripletValidation:
    def test_valid_triplets(self, tiny_dataset):
        tiny_dataset.validate_triplet(Triplet(0, 1, 2, NegativeKind.IN_CLASS))
        tiny_dataset.validate_triplet(Triplet(0, 1, 3, NegativeKind.OUT_OF_CLASS))

    def test_distinct_ids(self, tiny_dataset):
        with pytest.raises(ValueError, match="not distinct"):
            tiny_dataset.validate_triplet(Triplet(0, 0, 2, NegativeKind.IN_CLASS))

    def test_category_constraints(self, tiny_dataset):
        with pytest.raises(ValueError, match="different categories"):
            tiny_dataset.validate_triplet(Triplet(0, 3, 2, NegativeKind.IN_CLASS))
        with pytest.raises(ValueError, match="in-class"):
            tiny_dataset.validate_triplet(Triplet(0, 1, 4, NegativeKind.IN_CLASS))
        with pytest.raises(ValueError, match="out-of-class"):
            tiny_dataset.validate_triplet(Triplet(0, 1, 2, NegativeKind.OUT_OF_CLASS))


class TestRelevance:
    def test_direct_sum(self, tiny_relevance):
        # category {0,1,2} with r01=2, r02=3 -> r_0 = 5
        assert tiny_relevance.total(0) == 5.0
        assert tiny_relevance.total(1) == 2.5
        assert tiny_relevance.total(3) == 1.0

    def test_symmetric_lookup(self, tiny_relevance):
        assert tiny_relevance.pair(1, 0) == 2.0
        assert tiny_relevance.pair(0, 1) == 2.0
        assert tiny_relevance.pair(0, 4) == 0.0  # absent pairs are zero

    def test_lone_image_total_zero(self):
        rel = RelevanceSource({}, {0: 0, 1: 1})
        assert rel.total(0) == 0.0

    def test_cross_category_pair_rejected(self):
        with pytest.raises(ValueError, match="crosses categories"):
            RelevanceSource({(0, 3): 1.0}, {0: 0, 3: 1})

    def test_negative_score_rejected(self):
        with pytest.raises(ValueError, match="invalid score"):
            RelevanceSource({(0, 1): -0.5}, {0: 0, 1: 0})

    def test_self_pair_rejected(self):
        with pytest.raises(ValueError, match="self-relevance"):
            RelevanceSource({(2, 2): 1.0}, {2: 0})

    def test_conflicting_duplicates_rejected(self):
        with pytest.raises(ValueError, match="conflicting"):
            RelevanceSource({(0, 1): 1.0, (1, 0): 2.0}, {0: 0, 1: 0})

    def test_total_at_least_max_pair(self, tiny_relevance, tiny_dataset):
        for i in tiny_dataset.ids:
            partners = [j for j in tiny_dataset.ids_in_category(tiny_dataset.category(i))
                        if j != i]
            if partners:
                assert tiny_relevance.total(i) >= max(
                    tiny_relevance.pair(i, j) for j in partners
                )

    def test_total_permutation_invariant(self):
        pairs = {(0, 1): 1.5, (0, 2): 0.25, (1, 2): 3.0}
        cats = {0: 0, 1: 0, 2: 0}
        rel_a = RelevanceSource(pairs, cats)
        shuffled = dict(reversed(list(pairs.items())))
        rel_b = RelevanceSource(shuffled, cats)
        for i in cats:
            assert rel_a.total(i) == rel_b.total(i)


class TestPersistence:
    def test_round_trip_bit_identical(self, tmp_path, tiny_dataset):
        manifest = tmp_path / "d.manifest.jsonl"
        save_dataset(tiny_dataset, manifest)
        loaded = load_dataset(manifest)
        assert loaded.ids == tiny_dataset.ids
        assert np.array_equal(loaded.tensors, tiny_dataset.tensors)
        assert np.array_equal(loaded.latents, tiny_dataset.latents)
        assert [loaded.category(i) for i in loaded.ids] == \
               [tiny_dataset.category(i) for i in tiny_dataset.ids]

    def test_empty_dataset_round_trip(self, tmp_path):
        ds = Dataset((2, 3, 3), [], [], np.zeros((0, 2, 3, 3), dtype=np.float32))
        manifest = tmp_path / "empty.manifest.jsonl"
        save_dataset(ds, manifest)
        loaded = load_dataset(manifest)
        assert len(loaded) == 0

    def test_missing_blob(self, tmp_path, tiny_dataset):
        manifest = tmp_path / "d.manifest.jsonl"
        blob = save_dataset(tiny_dataset, manifest)
        import os
        os.remove(blob)
        with pytest.raises(ValueError, match="missing blob"):
            load_dataset(manifest)

    def test_truncated_blob_names_entry(self, tmp_path, tiny_dataset):
        manifest = tmp_path / "d.manifest.jsonl"
        blob = save_dataset(tiny_dataset, manifest)
        data = open(blob, "rb").read()
        with open(blob, "wb") as fh:
            fh.write(data[: len(data) // 2])
        with pytest.raises(ValueError, match="image id"):
            load_dataset(manifest)

    def test_bad_offset_names_entry(self, tmp_path, tiny_dataset):
        manifest = tmp_path / "d.manifest.jsonl"
        save_dataset(tiny_dataset, manifest)
        lines = open(manifest).read().splitlines()
        lines[2] = lines[2].replace('"offset": 64', '"offset": 60')
        with open(manifest, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="image id 1"):
            load_dataset(manifest)

    def test_relevance_round_trip(self, tmp_path, tiny_dataset, tiny_relevance):
        path = tmp_path / "rel.csv"
        save_relevance(tiny_relevance, path)
        loaded = load_relevance(path, tiny_dataset)
        assert dict(loaded.pairs()) == dict(tiny_relevance.pairs())
        for i in tiny_dataset.ids:
            assert loaded.total(i) == tiny_relevance.total(i)

    def test_relevance_canonical_order_enforced(self, tmp_path, tiny_dataset):
        path = tmp_path / "rel.csv"
        path.write_text("2,1,0.5\n")
        with pytest.raises(ValueError, match="canonical"):
            load_relevance(path, tiny_dataset)

    def test_relevance_cross_category_rejected_at_load(self, tmp_path, tiny_dataset):
        path = tmp_path / "rel.csv"
        path.write_text("0,3,0.9\n")  # ids 0 and 3 are in different categories
        with pytest.raises(ValueError, match="crosses categories"):
            load_relevance(path, tiny_dataset)

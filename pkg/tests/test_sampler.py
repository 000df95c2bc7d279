import numpy as np
import pytest

from tripletrank.data import NegativeKind, RelevanceSource
from tripletrank.sampler import BufferSet, InsertKind, ReservoirBuffer, SamplerConfig


class ScriptedRng:
    """Replays fixed uniform draws / integer picks for exact-path tests."""

    def __init__(self, randoms=(), integers=()):
        self._randoms = list(randoms)
        self._integers = list(integers)

    def random(self, *args):
        return self._randoms.pop(0)

    def integers(self, *args, **kwargs):
        return self._integers.pop(0)


def weighted_reservoir_oracle(weights, capacity, rng):
    """Independent naive implementation of the same key scheme (list + min scan)."""
    kept = []  # (key, index)
    for idx, w in enumerate(weights):
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        key = u ** (1.0 / w)
        if len(kept) < capacity:
            kept.append((key, idx))
        else:
            min_pos = min(range(len(kept)), key=lambda k: kept[k][0])
            if key > kept[min_pos][0]:
                kept[min_pos] = (key, idx)
    return [idx for _, idx in kept]


class TestInsert:
    def test_key_formula(self):
        buf = ReservoirBuffer(category=0, capacity=4)
        buf.insert(1, 1.0, ScriptedRng(randoms=[0.5]))
        buf.insert(2, 2.0, ScriptedRng(randoms=[0.25]))
        keys = {e.image_id: e.key for e in buf.entries}
        assert keys[1] == pytest.approx(0.5)       # 0.5 ** 1
        assert keys[2] == pytest.approx(0.5)       # 0.25 ** (1/2)

    def test_zero_relevance_distinct_outcome(self):
        buffers = BufferSet(SamplerConfig())
        out = buffers.insert(7, 0, 0.0, np.random.default_rng(0))
        assert out.kind is InsertKind.ZERO_RELEVANCE
        assert len(buffers.buffers[0]) == 0

    def test_lazy_buffer_creation(self):
        buffers = BufferSet(SamplerConfig())
        assert buffers.buffers == {}
        buffers.insert(1, 5, 1.0, np.random.default_rng(0))
        assert list(buffers.buffers) == [5]

    def test_replacement_evicts_minimum_key(self):
        rng = np.random.default_rng(3)
        buf = ReservoirBuffer(category=0, capacity=3)
        for i in range(50):
            before = {e.image_id: e.key for e in buf.entries}
            out = buf.insert(i, 1.0 + (i % 5), rng)
            assert len(buf) <= 3
            if out.kind is InsertKind.REPLACED:
                assert before[out.replaced_id] == min(before.values())
            elif out.kind is InsertKind.DISCARDED:
                assert {e.image_id: e.key for e in buf.entries} == before

    def test_capacity_one_analytic_retention(self):
        # keys u^(1/w): P(second survives) = w2/(w1+w2) = 0.75
        rng = np.random.default_rng(99)
        wins = 0
        trials = 100_000
        for _ in range(trials):
            buf = ReservoirBuffer(category=0, capacity=1)
            buf.insert(0, 1.0, rng)
            buf.insert(1, 3.0, rng)
            wins += buf.entries[0].image_id == 1
        assert wins / trials == pytest.approx(0.75, abs=0.01)

    def test_capacity_two_matches_brute_force_oracle(self):
        weights = [1.0, 2.0, 3.0, 4.0]
        trials = 30_000
        rng_impl = np.random.default_rng(7)
        counts_impl = np.zeros(4)
        for _ in range(trials):
            buf = ReservoirBuffer(category=0, capacity=2)
            for idx, w in enumerate(weights):
                buf.insert(idx, w, rng_impl)
            for e in buf.entries:
                counts_impl[e.image_id] += 1
        rng_oracle = np.random.default_rng(8)
        counts_oracle = np.zeros(4)
        for _ in range(trials):
            for idx in weighted_reservoir_oracle(weights, 2, rng_oracle):
                counts_oracle[idx] += 1
        np.testing.assert_allclose(counts_impl / trials, counts_oracle / trials, atol=0.01)


def two_category_buffers(t_r=0.0, ratio=0.5, t_p=np.inf, max_failures=50, capacity=8):
    """Category 0 = {1, 2, 3}, category 1 = {4, 5}; fixed relevance."""
    pairs = {(1, 2): 1.0, (1, 3): 2.0, (2, 3): 0.5, (4, 5): 1.0}
    cats = {1: 0, 2: 0, 3: 0, 4: 1, 5: 1}
    rel = RelevanceSource(pairs, cats)
    buffers = BufferSet(SamplerConfig(buffer_capacity=capacity, t_p=t_p, t_r=t_r,
                                      out_of_class_ratio=ratio, max_failures=max_failures))
    rng = np.random.default_rng(0)
    for img, cat in cats.items():
        buffers.insert(img, cat, rel.total(img), rng)
    return buffers, rel


class TestSampleQuery:
    def test_single_entry_forced(self):
        buffers = BufferSet(SamplerConfig())
        buffers.insert(9, 0, 2.0, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        assert all(buffers.sample_query(rng) == 9 for _ in range(10))

    def test_all_empty_raises(self):
        buffers = BufferSet(SamplerConfig())
        with pytest.raises(ValueError, match="empty"):
            buffers.sample_query(np.random.default_rng(0))

    def test_uniform_within_buffer(self):
        buffers = BufferSet(SamplerConfig())
        rng = np.random.default_rng(5)
        buffers.insert(1, 0, 1.0, rng)
        buffers.insert(2, 0, 10.0, rng)
        draws = 100_000
        hits = sum(buffers.sample_query(rng) == 1 for _ in range(draws))
        assert hits / draws == pytest.approx(0.5, abs=0.01)

    def test_composite_marginal_matches_brute_force(self):
        # stream weights 1:2:3 into a capacity-2 buffer, then one query draw;
        # oracle replays the identical scheme naively
        weights = {10: 1.0, 11: 2.0, 12: 3.0}
        trials = 30_000

        rng = np.random.default_rng(21)
        counts_impl = {i: 0 for i in weights}
        for _ in range(trials):
            buffers = BufferSet(SamplerConfig(buffer_capacity=2))
            for img, w in weights.items():
                buffers.insert(img, 0, w, rng)
            counts_impl[buffers.sample_query(rng)] += 1

        rng_o = np.random.default_rng(22)
        ids = list(weights)
        counts_oracle = {i: 0 for i in weights}
        for _ in range(trials):
            kept = weighted_reservoir_oracle([weights[i] for i in ids], 2, rng_o)
            pick = kept[rng_o.integers(len(kept))]
            counts_oracle[ids[pick]] += 1

        for img in weights:
            assert counts_impl[img] / trials == pytest.approx(
                counts_oracle[img] / trials, abs=0.01
            )


class TestSamplePositive:
    def test_saturated_acceptance_immediate(self):
        # candidate pair relevance >= its total and T_p = inf -> probability 1
        pairs = {(1, 2): 5.0}
        rel = RelevanceSource(pairs, {1: 0, 2: 0})
        buffers = BufferSet(SamplerConfig())
        rng = np.random.default_rng(0)
        buffers.insert(1, 0, rel.total(1), rng)
        buffers.insert(2, 0, rel.total(2), rng)
        for _ in range(20):
            assert buffers.sample_positive(1, rel, rng) == 2

    def test_zero_relevance_candidates_fail(self):
        buffers, _ = two_category_buffers(max_failures=10)
        rel = RelevanceSource({(4, 5): 1.0}, {1: 0, 2: 0, 3: 0, 4: 1, 5: 1})
        before = buffers.stats.positive_trials
        assert buffers.sample_positive(1, rel, np.random.default_rng(3)) is None
        assert buffers.stats.positive_trials - before == 10

    def test_buffer_too_small(self):
        buffers = BufferSet(SamplerConfig())
        buffers.insert(1, 0, 1.0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="fewer than 2"):
            buffers.sample_positive(1, None, np.random.default_rng(1))

    def test_acceptance_chain_matches_enumeration(self):
        # buffer {q, a, b}: r_a=4 with r_{q,a}=1, r_b=2 with r_{q,b}=2, T_p=inf
        # accept probs: a=1/4, b=1 -> geometric retry -> P(a) = 0.25/1.25 = 0.2
        pairs = {(0, 1): 1.0, (0, 2): 2.0}
        cats = {0: 0, 1: 0, 2: 0}
        rel = RelevanceSource(pairs, cats)
        buffers = BufferSet(SamplerConfig(max_failures=1000))
        rng = np.random.default_rng(0)
        buffers.insert(0, 0, 1.0, rng)
        buffers.insert(1, 0, 4.0, rng)   # candidate a: total 4
        buffers.insert(2, 0, 2.0, rng)   # candidate b: total 2
        draws = 100_000
        hits_a = 0
        for _ in range(draws):
            got = buffers.sample_positive(0, rel, rng)
            hits_a += got == 1
        assert hits_a / draws == pytest.approx(0.2, abs=0.01)


class TestSampleNegative:
    def test_forced_out_of_class(self):
        buffers, rel = two_category_buffers(ratio=1.0)
        rng = np.random.default_rng(4)
        for _ in range(50):
            neg, kind = buffers.sample_negative(1, 2, rel, rng)
            assert kind is NegativeKind.OUT_OF_CLASS
            assert neg in (4, 5)

    def test_margin_eligible(self):
        # query 1, positive 3: r_qp = 2.0; candidate 2: r_qn = 1.0
        # margin 1.0 >= T_r = 1.0 -> eligible
        buffers, rel = two_category_buffers(t_r=1.0, ratio=0.0)
        rng = np.random.default_rng(6)
        for _ in range(30):
            neg, kind = buffers.sample_negative(1, 3, rel, rng)
            assert kind is NegativeKind.IN_CLASS
            assert neg == 2
            assert rel.pair(1, 3) - rel.pair(1, neg) >= 1.0

    def test_margin_arithmetic_through_sampler(self):
        # query 0, positive 1 with r_qp=2.0; candidate 2 (r=0.5, margin 1.5,
        # eligible) and candidate 3 (r=1.5, margin 0.5 < T_r=1.0, never chosen)
        pairs = {(0, 1): 2.0, (0, 2): 0.5, (0, 3): 1.5}
        cats = {0: 0, 1: 0, 2: 0, 3: 0}
        rel = RelevanceSource(pairs, cats)
        buffers = BufferSet(SamplerConfig(t_r=1.0, out_of_class_ratio=0.0,
                                          max_failures=100))
        rng = np.random.default_rng(12)
        for img in cats:
            buffers.insert(img, 0, rel.total(img), rng)
        seen = set()
        for _ in range(200):
            result = buffers.sample_negative(0, 1, rel, rng)
            if result is not None:
                seen.add(result[0])
        assert seen == {2}

    def test_margin_violation_rejected(self):
        # query 1, positive 2 (r=1.0), candidate 3 has r=2.0 -> margin -1 < 1.0
        buffers, rel = two_category_buffers(t_r=1.0, ratio=0.0, max_failures=20)
        rng = np.random.default_rng(8)
        assert buffers.sample_negative(1, 2, rel, rng) is None
        assert buffers.stats.margin_rejections > 0

    def test_no_other_buffer_fails_out_of_class(self):
        pairs = {(1, 2): 1.0}
        rel = RelevanceSource(pairs, {1: 0, 2: 0})
        buffers = BufferSet(SamplerConfig(out_of_class_ratio=1.0))
        rng = np.random.default_rng(0)
        buffers.insert(1, 0, 1.0, rng)
        buffers.insert(2, 0, 1.0, rng)
        assert buffers.sample_negative(1, 2, rel, rng) is None


class TestSampleTriplet:
    def test_minimal_two_buffer_setup(self):
        # category 0 = {1, 2}, category 1 = {4}; out-of-class only
        pairs = {(1, 2): 1.0}
        cats = {1: 0, 2: 0, 4: 1}
        rel = RelevanceSource(pairs, cats)
        buffers = BufferSet(SamplerConfig(out_of_class_ratio=1.0))
        rng = np.random.default_rng(0)
        for img, cat in cats.items():
            buffers.insert(img, cat, max(rel.total(img), 1.0), rng)
        emitted = []
        for _ in range(200):
            t = buffers.sample_triplet(rel, rng)
            if t is not None:
                emitted.append(t)
        assert emitted
        for t in emitted:
            assert {t.query_id, t.positive_id} == {1, 2}
            assert t.negative_id == 4
            assert t.negative_kind is NegativeKind.OUT_OF_CLASS

    def test_emitted_triplets_satisfy_all_invariants(self, small_generated):
        train, rel, _, _ = small_generated
        config = SamplerConfig(buffer_capacity=16, t_r=0.05, out_of_class_ratio=0.3)
        buffers = BufferSet(config)
        rng = np.random.default_rng(13)
        buffers.insert_dataset(train, rel, rng)
        checked = 0
        for _ in range(10_000):
            t = buffers.sample_triplet(rel, rng)
            if t is None:
                continue
            checked += 1
            train.validate_triplet(t)
            if t.negative_kind is NegativeKind.IN_CLASS:
                assert rel.pair(t.query_id, t.positive_id) - \
                       rel.pair(t.query_id, t.negative_id) >= config.t_r
            assert rel.pair(t.query_id, t.positive_id) > 0.0
        assert checked > 5_000

    def test_discards_are_counted_not_looped(self):
        # max_failures bounds every draw; a pathological margin discards fast
        buffers, rel = two_category_buffers(t_r=100.0, ratio=0.0, max_failures=5)
        rng = np.random.default_rng(10)
        assert all(buffers.sample_triplet(rel, rng) is None for _ in range(50))
        assert buffers.stats.discards["negative"] > 0


class TestUniformSampling:
    def test_query_marginal_uniform(self):
        # weights 1:2:3 in one category; uniform mode ignores them
        pairs = {(1, 2): 1.0, (1, 3): 2.0, (2, 3): 3.0}
        cats = {1: 0, 2: 0, 3: 0}
        rel = RelevanceSource(pairs, cats)
        buffers = BufferSet(SamplerConfig(out_of_class_ratio=0.0, t_r=0.0))
        rng = np.random.default_rng(0)
        for img in cats:
            buffers.insert(img, 0, rel.total(img), rng)
        counts = {1: 0, 2: 0, 3: 0}
        draws = 100_000
        for _ in range(draws):
            t = buffers.uniform_sample_triplet(rel, rng)
            if t is not None:
                counts[t.query_id] += 1
        total = sum(counts.values())
        for img in counts:
            assert counts[img] / total == pytest.approx(1 / 3, abs=0.01)

    def test_margin_still_enforced(self, small_generated):
        train, rel, _, _ = small_generated
        config = SamplerConfig(buffer_capacity=16, t_r=0.05, out_of_class_ratio=0.0)
        buffers = BufferSet(config)
        rng = np.random.default_rng(3)
        buffers.insert_dataset(train, rel, rng)
        for _ in range(3_000):
            t = buffers.uniform_sample_triplet(rel, rng)
            if t is not None:
                assert rel.pair(t.query_id, t.positive_id) - \
                       rel.pair(t.query_id, t.negative_id) >= config.t_r

    def test_deterministic_replay(self, small_generated):
        train, rel, _, _ = small_generated

        def run():
            buffers = BufferSet(SamplerConfig(buffer_capacity=16))
            rng = np.random.default_rng(77)
            buffers.insert_dataset(train, rel, rng)
            return [buffers.uniform_sample_triplet(rel, rng) for _ in range(500)]

        assert run() == run()

    def test_equal_weights_match_weighted_distribution(self):
        # equal relevance -> weighted and uniform query marginals coincide
        cats = {i: i // 8 for i in range(16)}
        pairs = {}
        for c in (0, 1):
            members = [i for i, cat in cats.items() if cat == c]
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    pairs[(members[a], members[b])] = 1.0
        rel = RelevanceSource(pairs, cats)

        def marginal(uniform):
            buffers = BufferSet(SamplerConfig(buffer_capacity=8, out_of_class_ratio=0.5,
                                              t_r=0.0))
            rng = np.random.default_rng(31)
            for img, cat in cats.items():
                buffers.insert(img, cat, rel.total(img), rng)
            counts = np.zeros(16)
            draw = buffers.uniform_sample_triplet if uniform else buffers.sample_triplet
            emitted = 0
            while emitted < 100_000:
                t = draw(rel, rng)
                if t is not None:
                    counts[t.query_id] += 1
                    emitted += 1
            return counts / counts.sum()

        weighted, uniform = marginal(False), marginal(True)
        ks = np.abs(np.cumsum(weighted) - np.cumsum(uniform)).max()
        assert ks < 0.01


class TestStatsReport:
    def test_report_structure(self, small_generated):
        train, rel, _, _ = small_generated
        buffers = BufferSet(SamplerConfig(buffer_capacity=8))
        rng = np.random.default_rng(5)
        buffers.insert_dataset(train, rel, rng)
        for _ in range(500):
            buffers.sample_triplet(rel, rng)
        report = buffers.stats_report()
        assert set(report["buffer_occupancy"]) == {"0", "1", "2", "3"}
        assert all(v <= 8 for v in report["buffer_occupancy"].values())
        assert 0.0 < report["positive_acceptance_rate"] <= 1.0
        assert report["emitted_total"] == sum(report["emitted"].values())
        assert 0.0 <= report["out_of_class_fraction"] <= 1.0

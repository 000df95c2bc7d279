"""Streaming online triplet sampling with per-category weighted reservoirs.

Every incoming image gets a key u**(1/r) from a uniform draw u and its total
relevance r; each category keeps the top-key images in a fixed-capacity
buffer, so buffer membership is proportional to total relevance. Queries are
drawn uniformly within a buffer, positives by acceptance-rejection with
probability min(1, min(T_p, r_qc) / r_c), and negatives either uniformly from
the other buffers (out-of-class) or positive-style within the buffer subject
to the relevance margin r_qp - r_qn >= T_r (in-class).
"""

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from tripletrank.data import NegativeKind, Triplet


class InsertKind(Enum):
    INSERTED = "inserted"
    REPLACED = "replaced"
    DISCARDED = "discarded"
    ZERO_RELEVANCE = "zero_relevance"


@dataclass(frozen=True)
class InsertOutcome:
    kind: InsertKind
    replaced_id: int | None = None


@dataclass(frozen=True)
class SamplerConfig:
    buffer_capacity: int = 64
    t_p: float = math.inf
    t_r: float = 0.1
    out_of_class_ratio: float = 0.2
    max_failures: int = 50
    seed: int = 0

    def validate(self):
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if math.isnan(self.t_p) or self.t_p <= 0:
            raise ValueError("t_p must be positive (math.inf disables the cap)")
        if not math.isfinite(self.t_r) or self.t_r < 0:
            raise ValueError("t_r must be finite and >= 0")
        if not 0.0 <= self.out_of_class_ratio <= 1.0:
            raise ValueError("out_of_class_ratio must be in [0, 1]")
        if self.max_failures < 1:
            raise ValueError("max_failures must be >= 1")


@dataclass
class BufferEntry:
    image_id: int
    key: float
    total_relevance: float

    def __lt__(self, other):
        return (self.key, self.image_id) < (other.key, other.image_id)


class ReservoirBuffer:
    """Fixed-capacity weighted reservoir for one category (min-key heap)."""

    def __init__(self, category, capacity):
        self.category = category
        self.capacity = capacity
        self.entries = []  # heapified by key

    def __len__(self):
        return len(self.entries)

    def insert(self, image_id, total_relevance, rng):
        if total_relevance <= 0.0:
            return InsertOutcome(InsertKind.ZERO_RELEVANCE)
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        entry = BufferEntry(image_id, u ** (1.0 / total_relevance), total_relevance)
        if len(self.entries) < self.capacity:
            heapq.heappush(self.entries, entry)
            return InsertOutcome(InsertKind.INSERTED)
        if entry.key > self.entries[0].key:
            evicted = heapq.heapreplace(self.entries, entry)
            return InsertOutcome(InsertKind.REPLACED, replaced_id=evicted.image_id)
        return InsertOutcome(InsertKind.DISCARDED)

    def ids(self):
        return [e.image_id for e in self.entries]


@dataclass
class SamplerStats:
    inserts: dict = field(default_factory=lambda: {k.value: 0 for k in InsertKind})
    positive_trials: int = 0
    positive_accepts: int = 0
    negative_trials: int = 0
    margin_rejections: int = 0
    discards: dict = field(default_factory=lambda: {"query": 0, "positive": 0, "negative": 0})
    emitted: dict = field(default_factory=lambda: {k.value: 0 for k in NegativeKind})

    def as_dict(self, buffers=None):
        emitted_total = sum(self.emitted.values())
        out = {
            "inserts": dict(self.inserts),
            "positive_trials": self.positive_trials,
            "positive_acceptance_rate": (
                self.positive_accepts / self.positive_trials if self.positive_trials else None
            ),
            "negative_trials": self.negative_trials,
            "margin_rejections": self.margin_rejections,
            "discards": dict(self.discards),
            "emitted": dict(self.emitted),
            "emitted_total": emitted_total,
            "out_of_class_fraction": (
                self.emitted[NegativeKind.OUT_OF_CLASS.value] / emitted_total
                if emitted_total else None
            ),
        }
        if buffers is not None:
            out["buffer_occupancy"] = {str(c): len(b) for c, b in sorted(buffers.items())}
        return out


class BufferSet:
    """All category reservoirs plus the triplet-drawing operations."""

    def __init__(self, config):
        config.validate()
        self.config = config
        self.buffers = {}  # category -> ReservoirBuffer, created lazily
        self.stats = SamplerStats()
        self._location = {}  # buffered image id -> category

    def insert(self, image_id, category, total_relevance, rng):
        """Stream one image in; returns what happened to it."""
        buf = self.buffers.get(category)
        if buf is None:
            buf = self.buffers[category] = ReservoirBuffer(category, self.config.buffer_capacity)
        outcome = buf.insert(image_id, total_relevance, rng)
        self.stats.inserts[outcome.kind.value] += 1
        if outcome.kind in (InsertKind.INSERTED, InsertKind.REPLACED):
            self._location[image_id] = category
        if outcome.replaced_id is not None:
            self._location.pop(outcome.replaced_id, None)
        return outcome

    def insert_dataset(self, dataset, relevance, rng):
        """Stream a whole dataset through in id order."""
        for image_id in dataset.ids:
            self.insert(image_id, dataset.category(image_id), relevance.total(image_id), rng)

    def _nonempty(self):
        return [b for _, b in sorted(self.buffers.items()) if len(b) > 0]

    def buffer_of(self, image_id):
        try:
            return self.buffers[self._location[image_id]]
        except KeyError:
            raise KeyError(f"image id {image_id} is not buffered") from None

    def sample_query(self, rng):
        """Uniform over nonempty buffers, then uniform within the buffer."""
        nonempty = self._nonempty()
        if not nonempty:
            raise ValueError("all buffers are empty")
        buf = nonempty[rng.integers(len(nonempty))]
        return buf.entries[rng.integers(len(buf))].image_id

    def sample_positive(self, query_id, relevance, rng):
        """Accept-reject a same-buffer candidate; None when the budget runs out."""
        buf = self.buffer_of(query_id)
        candidates = [e for e in buf.entries if e.image_id != query_id]
        if not candidates:
            raise ValueError(f"buffer of query {query_id} has fewer than 2 entries")
        t_p = self.config.t_p
        for _ in range(self.config.max_failures):
            cand = candidates[rng.integers(len(candidates))]
            self.stats.positive_trials += 1
            r_pair = relevance.pair(query_id, cand.image_id)
            accept = min(1.0, min(t_p, r_pair) / cand.total_relevance)
            if rng.random() < accept:
                self.stats.positive_accepts += 1
                return cand.image_id
        return None

    def _out_of_class_pool(self, query_category):
        return [
            e for cat, buf in sorted(self.buffers.items()) if cat != query_category
            for e in buf.entries
        ]

    def sample_negative(self, query_id, positive_id, relevance, rng):
        """Draw (negative_id, kind); None when no candidate survives the budget."""
        buf = self.buffer_of(query_id)
        if rng.random() < self.config.out_of_class_ratio:
            pool = self._out_of_class_pool(buf.category)
            if not pool:
                return None
            self.stats.negative_trials += 1
            return pool[rng.integers(len(pool))].image_id, NegativeKind.OUT_OF_CLASS
        candidates = [e for e in buf.entries if e.image_id not in (query_id, positive_id)]
        if not candidates:
            return None
        t_p = self.config.t_p
        r_pos = relevance.pair(query_id, positive_id)
        for _ in range(self.config.max_failures):
            cand = candidates[rng.integers(len(candidates))]
            self.stats.negative_trials += 1
            r_pair = relevance.pair(query_id, cand.image_id)
            accept = min(1.0, min(t_p, r_pair) / cand.total_relevance)
            if rng.random() >= accept:
                continue
            if r_pos - r_pair < self.config.t_r:
                self.stats.margin_rejections += 1
                continue
            return cand.image_id, NegativeKind.IN_CLASS
        return None

    def sample_triplet(self, relevance, rng):
        """Full weighted draw; None means the example was discarded."""
        query_id = self.sample_query(rng)
        if len(self.buffer_of(query_id)) < 2:
            self.stats.discards["query"] += 1
            return None
        positive_id = self.sample_positive(query_id, relevance, rng)
        if positive_id is None:
            self.stats.discards["positive"] += 1
            return None
        negative = self.sample_negative(query_id, positive_id, relevance, rng)
        if negative is None:
            self.stats.discards["negative"] += 1
            return None
        negative_id, kind = negative
        self.stats.emitted[kind.value] += 1
        return Triplet(query_id, positive_id, negative_id, kind)

    def uniform_sample_triplet(self, relevance, rng):
        """Uniform draws with the same ordering and margin constraints."""
        all_entries = [e for buf in self._nonempty() for e in buf.entries]
        if not all_entries:
            raise ValueError("all buffers are empty")
        query_id = all_entries[rng.integers(len(all_entries))].image_id
        buf = self.buffer_of(query_id)
        if len(buf) < 2:
            self.stats.discards["query"] += 1
            return None

        candidates = [e for e in buf.entries if e.image_id != query_id]
        positive_id = None
        for _ in range(self.config.max_failures):
            cand = candidates[rng.integers(len(candidates))]
            self.stats.positive_trials += 1
            if relevance.pair(query_id, cand.image_id) > 0.0:
                self.stats.positive_accepts += 1
                positive_id = cand.image_id
                break
        if positive_id is None:
            self.stats.discards["positive"] += 1
            return None

        if rng.random() < self.config.out_of_class_ratio:
            pool = self._out_of_class_pool(buf.category)
            if not pool:
                self.stats.discards["negative"] += 1
                return None
            self.stats.negative_trials += 1
            negative_id, kind = pool[rng.integers(len(pool))].image_id, NegativeKind.OUT_OF_CLASS
        else:
            neg_candidates = [
                e for e in buf.entries if e.image_id not in (query_id, positive_id)
            ]
            if not neg_candidates:
                self.stats.discards["negative"] += 1
                return None
            r_pos = relevance.pair(query_id, positive_id)
            negative_id = None
            for _ in range(self.config.max_failures):
                cand = neg_candidates[rng.integers(len(neg_candidates))]
                self.stats.negative_trials += 1
                if r_pos - relevance.pair(query_id, cand.image_id) >= self.config.t_r:
                    negative_id = cand.image_id
                    break
                self.stats.margin_rejections += 1
            if negative_id is None:
                self.stats.discards["negative"] += 1
                return None
            kind = NegativeKind.IN_CLASS

        self.stats.emitted[kind.value] += 1
        return Triplet(query_id, positive_id, negative_id, kind)

    def stats_report(self):
        return self.stats.as_dict(self.buffers)

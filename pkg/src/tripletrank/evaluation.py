"""Triplet ranking evaluation: similarity precision and score-at-top-K.

Both metrics use the same strict rule: a triplet is correct iff the positive
is strictly closer to the query than the negative; exact ties count as
incorrect. For score-at-top-K, each query ranks a candidate pool by squared
embedding distance (the query itself is excluded from its own neighbor
list) and only triplets whose positive or negative lands in the top K are
scored: correct minus incorrect over that subset.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from tripletrank.sampler import BufferSet


@dataclass(frozen=True)
class EvalReport:
    precision: float
    score_at_top_k: int
    k: int
    n_triplets: int
    n_eligible: int

    def as_dict(self):
        return {
            "precision": self.precision,
            "score_at_top_k": self.score_at_top_k,
            "K": self.k,
            "n_triplets": self.n_triplets,
            "n_eligible": self.n_eligible,
        }


def dataset_embedder(net, dataset, batch_size=256):
    """Callable mapping image ids to inference-mode embeddings, with a cache."""
    cache = {}

    def embed(ids):
        missing = [i for i in ids if i not in cache]
        for start in range(0, len(missing), batch_size):
            chunk = missing[start : start + batch_size]
            x = np.stack([dataset.tensor(i) for i in chunk])
            for img_id, emb in zip(chunk, net.embed(x)):
                cache[img_id] = emb
        return np.stack([cache[i] for i in ids])

    return embed


def latent_embedder(dataset):
    """Oracle model: the planted latent itself is the embedding."""

    def embed(ids):
        return np.stack([dataset.latent(i) for i in ids])

    return embed


def pair_distances(embed, triplets):
    ids = sorted({i for t in triplets for i in (t.query_id, t.positive_id, t.negative_id)})
    emb = embed(ids)
    row = {img_id: k for k, img_id in enumerate(ids)}
    e = emb.astype(np.float64)
    d_pos = np.empty(len(triplets))
    d_neg = np.empty(len(triplets))
    for k, t in enumerate(triplets):
        q = e[row[t.query_id]]
        d_pos[k] = np.sum((q - e[row[t.positive_id]]) ** 2)
        d_neg[k] = np.sum((q - e[row[t.negative_id]]) ** 2)
    return d_pos, d_neg


def similarity_precision(embed, triplets):
    """Fraction of triplets ranked correctly (ties count as incorrect)."""
    if not triplets:
        raise ValueError("no triplets to evaluate")
    d_pos, d_neg = pair_distances(embed, triplets)
    return float((d_pos < d_neg).mean())


def rank_pool(embed, query_id, pool_ids):
    """Pool ids sorted by ascending squared distance to the query, ties by id."""
    if not pool_ids:
        raise ValueError("empty candidate pool")
    emb = embed([query_id] + list(pool_ids)).astype(np.float64)
    dists = np.sum((emb[1:] - emb[0]) ** 2, axis=1)
    order = np.lexsort((np.asarray(pool_ids), dists))
    return [pool_ids[i] for i in order]


def score_at_top_k(embed, groups, k):
    """Correct minus incorrect triplets among those ranking in the top K.

    `groups` is a list of (query_id, pool_ids, triplets); a triplet is
    eligible iff its positive or negative is within the query's top K pool
    neighbors. Returns (score, n_eligible).
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    score = 0
    eligible = 0
    for query_id, pool_ids, triplets in groups:
        pool = set(pool_ids)
        for t in triplets:
            if t.positive_id not in pool or t.negative_id not in pool:
                raise ValueError(
                    f"triplet {(t.query_id, t.positive_id, t.negative_id)} references "
                    f"an image outside query {query_id}'s pool"
                )
        ranked = rank_pool(embed, query_id, [i for i in pool_ids if i != query_id])
        top = set(ranked[:k])
        if not triplets:
            continue
        d_pos, d_neg = pair_distances(embed, triplets)
        for t, dp, dn in zip(triplets, d_pos, d_neg):
            if t.positive_id in top or t.negative_id in top:
                eligible += 1
                score += 1 if dp < dn else -1
    return score, eligible


def group_triplets_by_query(triplets):
    by_query = {}
    for t in triplets:
        by_query.setdefault(t.query_id, []).append(t)
    return by_query


def build_eval_groups(dataset, triplets, pool_size, rng):
    """Assemble (query, pool, triplets) groups for score-at-top-K.

    Each query's pool holds its triplet members, all images from its own
    category, and a random fill of other images up to `pool_size`.
    """
    groups = []
    all_ids = list(dataset.ids)
    for query_id, group in sorted(group_triplets_by_query(triplets).items()):
        members = {query_id}
        for t in group:
            members.update((t.positive_id, t.negative_id))
        pool = set(members) | set(dataset.ids_in_category(dataset.category(query_id)))
        extra = [i for i in all_ids if i not in pool]
        if len(pool) < pool_size and extra:
            fill = min(pool_size - len(pool), len(extra))
            pool.update(rng.choice(extra, size=fill, replace=False).tolist())
        groups.append((query_id, sorted(pool), group))
    return groups


def sample_eval_triplets(dataset, relevance, n, sampler_config, rng, uniform=True):
    """Draw evaluation triplets (uniform by default) over a fully buffered set."""
    capacity = max(len(dataset.ids_in_category(c)) for c in dataset.categories)
    config = dataclasses.replace(
        sampler_config, buffer_capacity=max(capacity, sampler_config.buffer_capacity)
    )
    buffers = BufferSet(config)
    buffers.insert_dataset(dataset, relevance, rng)
    draw = buffers.uniform_sample_triplet if uniform else buffers.sample_triplet
    triplets = []
    attempts = 0
    while len(triplets) < n:
        attempts += 1
        if attempts > 100 * n:
            raise RuntimeError(
                f"could only draw {len(triplets)} of {n} evaluation triplets; "
                "check margin and ratio settings"
            )
        t = draw(relevance, rng)
        if t is not None:
            triplets.append(t)
    return triplets


def evaluate(embed, triplets, groups, k):
    """Run both metrics and bundle them into an EvalReport."""
    precision = similarity_precision(embed, triplets)
    score, eligible = score_at_top_k(embed, groups, k)
    return EvalReport(precision, score, k, len(triplets), eligible)

"""Synthetic datasets with a planted ground-truth embedding.

Each category gets a latent centroid; each image a latent = centroid + noise.
Pixels are a deterministic smooth rendering of the latent (a seeded bank of
low-frequency basis fields mixed linearly, squashed into [0,1]), so a network
can recover the latent from pixels. Pairwise relevance within a category is
exp(-decay * ||latent_i - latent_j||); cross-category relevance is zero.
The latent distances double as an oracle for ranking triplets.
"""

from dataclasses import dataclass

import numpy as np

from tripletrank.data import Dataset, RelevanceSource

_BASIS_COMPONENTS = 6
_CENTROID_SEPARATION = 8.0  # in units of within-category spread


@dataclass(frozen=True)
class GenConfig:
    num_categories: int = 10
    images_per_category: int = 50
    eval_per_category: int = 20
    latent_dim: int = 4
    shape: tuple = (3, 32, 32)
    spread: float = 0.1
    decay: float = 1.0
    pixel_noise: float = 0.35
    seed: int = 0

    def validate(self):
        if self.num_categories < 1 or self.images_per_category < 1:
            raise ValueError("need at least one category and one image per category")
        if self.eval_per_category < 0:
            raise ValueError("eval_per_category must be >= 0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise ValueError(f"shape must be (C, H, W) with positive dims, got {self.shape}")
        for name in ("spread", "decay"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be finite and positive, got {v}")
        if self.pixel_noise < 0:
            raise ValueError("pixel_noise must be >= 0")


def _smooth_basis(rng, latent_dim, shape):
    """Random low-frequency fields, one per latent dimension, unit RMS each."""
    c, h, w = shape
    ii, jj = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    basis = np.zeros((latent_dim, c, h, w))
    for k in range(latent_dim):
        for ch in range(c):
            field = np.zeros((h, w))
            for _ in range(_BASIS_COMPONENTS):
                fx, fy = rng.uniform(0.5, 2.5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                field += rng.normal() * np.cos(2 * np.pi * (fx * ii + fy * jj) + phase)
            basis[k, ch] = field
        rms = np.sqrt(np.mean(basis[k] ** 2))
        basis[k] /= max(rms, 1e-12)
    return basis


def _draw_centroids(rng, config):
    """Standard-normal centroids kept at least 8 spreads apart."""
    min_sep = _CENTROID_SEPARATION * config.spread
    centroids = []
    for _ in range(config.num_categories):
        for _attempt in range(1000):
            cand = rng.normal(size=config.latent_dim)
            if all(np.linalg.norm(cand - c) >= min_sep for c in centroids):
                centroids.append(cand)
                break
        else:
            raise ValueError(
                f"could not place {config.num_categories} centroids with separation "
                f"{min_sep:.3g} in {config.latent_dim} latent dims; reduce spread or categories"
            )
    return np.asarray(centroids)


def _render(latents, basis, rng, pixel_noise):
    """Mix latents into basis fields and squash smoothly into (0,1)."""
    mixed = np.tensordot(latents, basis, axes=(1, 0)) / np.sqrt(basis.shape[0])
    if pixel_noise > 0:
        mixed = mixed + rng.normal(scale=pixel_noise, size=mixed.shape)
    return (0.5 + 0.5 * np.tanh(0.5 * mixed)).astype(np.float32)


def _relevance_pairs(ids, categories, latents, decay):
    pairs = {}
    by_cat = {}
    for img_id, cat in zip(ids, categories):
        by_cat.setdefault(cat, []).append(img_id)
    row = {img_id: k for k, img_id in enumerate(ids)}
    for members in by_cat.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                i, j = members[a], members[b]
                dist = np.linalg.norm(latents[row[i]] - latents[row[j]])
                pairs[(i, j)] = float(np.exp(-decay * dist))
    return pairs


def generate_split(config):
    """Generate disjoint train/eval image sets sharing centroids and basis.

    Returns (train_dataset, train_relevance, eval_dataset, eval_relevance);
    the eval pair is (None, None) when ``eval_per_category`` is 0. Fully
    reproducible from ``config.seed``.
    """
    config.validate()
    seq = np.random.SeedSequence(config.seed)
    rng_basis, rng_centroids, rng_latents, rng_noise = (
        np.random.default_rng(s) for s in seq.spawn(4)
    )
    basis = _smooth_basis(rng_basis, config.latent_dim, config.shape)
    centroids = _draw_centroids(rng_centroids, config)

    per_cat = config.images_per_category + config.eval_per_category
    train, evals = [], []  # (id, category, latent)
    next_id = 0
    for cat in range(config.num_categories):
        noise = rng_latents.normal(scale=config.spread, size=(per_cat, config.latent_dim))
        for k in range(per_cat):
            latent = centroids[cat] + noise[k]
            bucket = train if k < config.images_per_category else evals
            bucket.append((next_id, cat, latent))
            next_id += 1

    def build(entries):
        if not entries:
            return None, None
        ids = [e[0] for e in entries]
        cats = [e[1] for e in entries]
        latents = np.asarray([e[2] for e in entries])
        tensors = _render(latents, basis, rng_noise, config.pixel_noise)
        dataset = Dataset(config.shape, ids, cats, tensors, latents)
        rel = RelevanceSource(
            _relevance_pairs(ids, cats, latents, config.decay),
            {img_id: cat for img_id, cat in zip(ids, cats)},
        )
        return dataset, rel

    train_ds, train_rel = build(train)
    eval_ds, eval_rel = build(evals)
    return train_ds, train_rel, eval_ds, eval_rel


def generate(config):
    """Generate the training split only; see ``generate_split``."""
    train_ds, train_rel, _, _ = generate_split(config)
    return train_ds, train_rel


def oracle_rank(dataset, triplet):
    """True iff the positive's planted latent is strictly closer to the query's."""
    zq = dataset.latent(triplet.query_id)
    zp = dataset.latent(triplet.positive_id)
    zn = dataset.latent(triplet.negative_id)
    return float(np.linalg.norm(zq - zp)) < float(np.linalg.norm(zq - zn))

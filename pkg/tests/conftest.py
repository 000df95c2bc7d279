import numpy as np
import pytest

from tripletrank.data import Dataset, RelevanceSource
from tripletrank.datagen import GenConfig, generate_split


@pytest.fixture
def tiny_dataset():
    """Two categories, five images, hand-built tensors and latents."""
    shape = (1, 4, 4)
    rng = np.random.default_rng(42)
    tensors = rng.random((5,) + shape, dtype=np.float32)
    latents = rng.normal(size=(5, 3))
    return Dataset(shape, ids=[0, 1, 2, 3, 4], categories=[0, 0, 0, 1, 1],
                   tensors=tensors, latents=latents)


@pytest.fixture
def tiny_relevance(tiny_dataset):
    pairs = {(0, 1): 2.0, (0, 2): 3.0, (1, 2): 0.5, (3, 4): 1.0}
    cats = {i: tiny_dataset.category(i) for i in tiny_dataset.ids}
    return RelevanceSource(pairs, cats)


@pytest.fixture(scope="session")
def small_generated():
    """A small planted dataset shared by sampler/trainer/eval tests."""
    config = GenConfig(num_categories=4, images_per_category=16, eval_per_category=8,
                       latent_dim=3, shape=(2, 16, 16), seed=11)
    return generate_split(config)


def central_difference(f, x, indices, step=1e-3):
    """Central finite differences of scalar f at x along the given flat indices."""
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        plus = x.copy()
        plus[i] += step
        minus = x.copy()
        minus[i] -= step
        out[k] = (f(plus) - f(minus)) / (2.0 * step)
    return out


def relative_error(analytic, numeric):
    """Vector-norm relative error between gradient estimates."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom

"""Data model and persistence: images, categories, pairwise relevance, triplets.

On-disk formats:
  * manifest: JSON Lines; a header ``{"shape": [C,H,W], "blob": "path"}``
    followed by one ``{"id", "category", "offset", "latent"?}`` object per image.
  * blob: raw little-endian float32, images concatenated in manifest order.
  * relevance: CSV lines ``i,j,r`` with ``r >= 0`` and ``i < j`` canonical order.
"""

import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np


class NegativeKind(Enum):
    IN_CLASS = "in_class"
    OUT_OF_CLASS = "out_of_class"


@dataclass(frozen=True)
class Triplet:
    """A (query, positive, negative) image-id tuple with the negative's kind."""

    query_id: int
    positive_id: int
    negative_id: int
    negative_kind: NegativeKind


@dataclass(frozen=True)
class ImageRecord:
    """One sample: dense integer id, category id, C*H*W tensor in [0,1],
    and an optional planted latent vector (synthetic data only)."""

    id: int
    category: int
    tensor: np.ndarray
    latent: np.ndarray | None = None


class Dataset:
    """Immutable collection of images with categories and optional latents.

    Tensors are stored as one (N, C, H, W) float32 array; lookups are by
    image id. Safe for concurrent reads once constructed.
    """

    def __init__(self, shape, ids, categories, tensors, latents=None):
        self.shape = tuple(int(s) for s in shape)
        self.ids = [int(i) for i in ids]
        self._categories = np.asarray(categories, dtype=np.int64)
        self.tensors = np.ascontiguousarray(tensors, dtype=np.float32)
        self.latents = None if latents is None else np.asarray(latents, dtype=np.float64)
        self._validate()
        self._row = {img_id: row for row, img_id in enumerate(self.ids)}
        self._by_category = {}
        for img_id, cat in zip(self.ids, self._categories):
            self._by_category.setdefault(int(cat), []).append(img_id)

    def _validate(self):
        if len(self.shape) != 3:
            raise ValueError(f"tensor shape must be (C, H, W), got {self.shape}")
        n = len(self.ids)
        if self.tensors.shape != (n,) + self.shape:
            raise ValueError(
                f"tensor array shape {self.tensors.shape} does not match "
                f"{n} images of shape {self.shape}"
            )
        if len(self._categories) != n:
            raise ValueError("category list length does not match image count")
        seen = set()
        for img_id in self.ids:
            if img_id in seen:
                raise ValueError(f"duplicate image id {img_id}")
            seen.add(img_id)
        if not np.isfinite(self.tensors).all():
            bad = int(np.where(~np.isfinite(self.tensors).reshape(n, -1).all(axis=1))[0][0])
            raise ValueError(f"non-finite tensor values for image id {self.ids[bad]}")
        if self.tensors.size and (self.tensors.min() < 0.0 or self.tensors.max() > 1.0):
            flat = self.tensors.reshape(n, -1)
            bad = int(np.where((flat < 0.0).any(axis=1) | (flat > 1.0).any(axis=1))[0][0])
            raise ValueError(f"tensor values outside [0,1] for image id {self.ids[bad]}")
        if self.latents is not None and len(self.latents) != n:
            raise ValueError("latent array length does not match image count")

    def __len__(self):
        return len(self.ids)

    def row_of(self, image_id):
        try:
            return self._row[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id}") from None

    def tensor(self, image_id):
        return self.tensors[self.row_of(image_id)]

    def category(self, image_id):
        return int(self._categories[self.row_of(image_id)])

    def latent(self, image_id):
        if self.latents is None:
            raise ValueError(f"dataset carries no latents (image id {image_id})")
        return self.latents[self.row_of(image_id)]

    def record(self, image_id):
        row = self.row_of(image_id)
        latent = None if self.latents is None else self.latents[row]
        return ImageRecord(self.ids[row], int(self._categories[row]), self.tensors[row], latent)

    @property
    def categories(self):
        return sorted(self._by_category)

    def ids_in_category(self, category):
        return list(self._by_category.get(int(category), []))

    def validate_triplet(self, triplet):
        """Check a triplet's id/category invariants against this dataset."""
        q, p, n = triplet.query_id, triplet.positive_id, triplet.negative_id
        if len({q, p, n}) != 3:
            raise ValueError(f"triplet ids are not distinct: {(q, p, n)}")
        if self.category(q) != self.category(p):
            raise ValueError(f"query {q} and positive {p} are in different categories")
        same = self.category(q) == self.category(n)
        if triplet.negative_kind is NegativeKind.IN_CLASS and not same:
            raise ValueError(f"in-class negative {n} is not in query {q}'s category")
        if triplet.negative_kind is NegativeKind.OUT_OF_CLASS and same:
            raise ValueError(f"out-of-class negative {n} shares query {q}'s category")


class RelevanceSource:
    """Sparse symmetric pairwise relevance scores plus per-image totals.

    Only same-category pairs may carry a score; everything absent is zero.
    ``total(i)`` is the sum of i's same-category scores and acts as the
    image's sampling weight.
    """

    def __init__(self, pairs, categories):
        """`pairs` maps (i, j) -> r >= 0; `categories` maps image id -> category."""
        self._pairs = {}
        self._totals = {img_id: 0.0 for img_id in categories}
        for (i, j), r in pairs.items():
            i, j = int(i), int(j)
            r = float(r)
            if i == j:
                raise ValueError(f"self-relevance entry for image {i}")
            if i not in categories or j not in categories:
                raise ValueError(f"relevance pair ({i},{j}) references an unknown image id")
            if categories[i] != categories[j]:
                raise ValueError(
                    f"relevance pair ({i},{j}) crosses categories "
                    f"{categories[i]} and {categories[j]}"
                )
            if not np.isfinite(r) or r < 0.0:
                raise ValueError(f"relevance pair ({i},{j}) has invalid score {r}")
            key = (i, j) if i < j else (j, i)
            if key in self._pairs and self._pairs[key] != r:
                raise ValueError(f"conflicting scores for relevance pair {key}")
            if key not in self._pairs:
                self._pairs[key] = r
                self._totals[key[0]] += r
                self._totals[key[1]] += r

    def pair(self, i, j):
        """Relevance score r_{i,j}; zero when no entry exists."""
        key = (i, j) if i < j else (j, i)
        return self._pairs.get(key, 0.0)

    def total(self, image_id):
        """Total relevance: the sum of the image's same-category pair scores."""
        try:
            return self._totals[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id}") from None

    def pairs(self):
        """Iterate canonical ((i, j), r) entries with i < j."""
        return iter(sorted(self._pairs.items()))

    def __len__(self):
        return len(self._pairs)


def _image_nbytes(shape):
    c, h, w = shape
    return c * h * w * 4


def save_dataset(dataset, manifest_path, blob_path=None):
    """Write manifest JSONL plus the float32 tensor blob next to it."""
    manifest_path = os.fspath(manifest_path)
    if blob_path is None:
        base = manifest_path[:-len(".manifest.jsonl")] if manifest_path.endswith(".manifest.jsonl") \
            else os.path.splitext(manifest_path)[0]
        blob_path = base + ".blob"
    rel_blob = os.path.relpath(blob_path, os.path.dirname(manifest_path) or ".")
    nbytes = _image_nbytes(dataset.shape)
    with open(manifest_path, "w") as fh:
        fh.write(json.dumps({"shape": list(dataset.shape), "blob": rel_blob}) + "\n")
        for row, img_id in enumerate(dataset.ids):
            entry = {
                "id": img_id,
                "category": int(dataset._categories[row]),
                "offset": row * nbytes,
            }
            if dataset.latents is not None:
                entry["latent"] = [float(v) for v in dataset.latents[row]]
            fh.write(json.dumps(entry) + "\n")
    with open(blob_path, "wb") as fh:
        fh.write(dataset.tensors.astype("<f4", copy=False).tobytes())
    return blob_path


def load_dataset(manifest_path):
    """Read a manifest + blob pair back into a validated Dataset."""
    manifest_path = os.fspath(manifest_path)
    with open(manifest_path) as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"manifest {manifest_path} is empty (missing header)")
    header = json.loads(lines[0])
    if "shape" not in header or "blob" not in header:
        raise ValueError(f"manifest {manifest_path} header lacks 'shape'/'blob'")
    shape = tuple(int(s) for s in header["shape"])
    blob_path = os.path.join(os.path.dirname(manifest_path) or ".", header["blob"])
    if not os.path.exists(blob_path):
        raise ValueError(f"missing blob file {blob_path}")
    nbytes = _image_nbytes(shape)
    raw = np.fromfile(blob_path, dtype="<f4")
    ids, categories, latents = [], [], []
    have_latent = None
    for lineno, line in enumerate(lines[1:], start=2):
        entry = json.loads(line)
        img_id = int(entry["id"])
        expected = (lineno - 2) * nbytes
        if int(entry["offset"]) != expected:
            raise ValueError(
                f"image id {img_id}: offset {entry['offset']} does not match "
                f"manifest-order position {expected}"
            )
        if (int(entry["offset"]) + nbytes) // 4 > raw.size:
            raise ValueError(f"image id {img_id}: blob too short for declared shape {shape}")
        ids.append(img_id)
        categories.append(int(entry["category"]))
        latent = entry.get("latent")
        if have_latent is None:
            have_latent = latent is not None
        elif have_latent != (latent is not None):
            raise ValueError(f"image id {img_id}: inconsistent latent presence")
        if latent is not None:
            latents.append(latent)
    n = len(ids)
    if raw.size != n * nbytes // 4:
        raise ValueError(
            f"blob {blob_path} holds {raw.size * 4} bytes, expected {n * nbytes} "
            f"for {n} images of shape {shape}"
        )
    tensors = raw.reshape((n,) + shape) if n else np.zeros((0,) + shape, dtype=np.float32)
    if latents and len({len(l) for l in latents}) > 1:
        raise ValueError("inconsistent latent dimensions across manifest entries")
    return Dataset(shape, ids, categories, tensors, np.asarray(latents) if latents else None)


def save_relevance(relevance, path):
    """Write canonical `i,j,r` CSV lines."""
    with open(path, "w") as fh:
        for (i, j), r in relevance.pairs():
            fh.write(f"{i},{j},{r!r}\n")


def load_relevance(path, dataset):
    """Read an `i,j,r` CSV and validate it against the dataset's categories."""
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'i,j,r', got {line!r}")
            i, j, r = int(parts[0]), int(parts[1]), float(parts[2])
            if i >= j:
                raise ValueError(f"{path}:{lineno}: pair ({i},{j}) not in canonical i<j order")
            pairs[(i, j)] = r
    categories = {img_id: dataset.category(img_id) for img_id in dataset.ids}
    return RelevanceSource(pairs, categories)

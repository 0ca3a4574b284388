"""Visual domain-gap measurement and diversity statistics.

Handcrafted features (pooled color histogram plus edge-orientation
histogram) stand in for a pretrained encoder; externally computed feature
vectors can be supplied through a small binary file format instead.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .validation import ConfigError, FormatError, as_rng, check_images

COLOR_BINS = 4           # per channel -> 64 histogram bins
ORIENT_BINS = 8
POOL = 2                 # 2x2 spatial pooling for edge orientations
FEATURE_DIM = COLOR_BINS**3 + ORIENT_BINS * POOL * POOL


class HandcraftedFeatures(BaseEstimator, TransformerMixin):
    """Deterministic image embedding: 64-bin RGB histogram concatenated with
    magnitude-weighted edge-orientation histograms over a 2x2 spatial grid."""

    def fit(self, X, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        imgs = check_images(X)
        return np.stack([self._embed_one(im) for im in imgs])

    @staticmethod
    def _embed_one(img: np.ndarray) -> np.ndarray:
        bins = np.clip((img * COLOR_BINS).astype(int), 0, COLOR_BINS - 1)
        flat = (bins[..., 0] * COLOR_BINS + bins[..., 1]) * COLOR_BINS + bins[..., 2]
        hist = np.bincount(flat.ravel(), minlength=COLOR_BINS**3).astype(np.float64)
        hist /= flat.size

        gray = img.mean(axis=-1)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        obin = np.clip(((ang + np.pi) / (2 * np.pi) * ORIENT_BINS).astype(int),
                       0, ORIENT_BINS - 1)
        h, w = gray.shape
        edges = []
        for r in range(POOL):
            for c in range(POOL):
                sl = (slice(r * h // POOL, (r + 1) * h // POOL),
                      slice(c * w // POOL, (c + 1) * w // POOL))
                pooled = np.bincount(
                    obin[sl].ravel(), weights=mag[sl].ravel(),
                    minlength=ORIENT_BINS,
                )
                edges.append(pooled)
        edge = np.concatenate(edges)
        total = edge.sum()
        if total > 0:
            edge = edge / total
        return np.concatenate([hist, edge])


@dataclass
class ExternalFeatures:
    """Feature vectors supplied in a file, echoed bit-exactly."""

    vectors: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ConfigError("external features must be (n, dim)")
        if len(self.ids) != len(self.vectors):
            raise ConfigError("id list does not match feature rows")

    def lookup(self, wanted_ids) -> np.ndarray:
        index = {i: k for k, i in enumerate(self.ids)}
        try:
            rows = [index[i] for i in wanted_ids]
        except KeyError as e:
            raise ConfigError(f"no external feature for id {e}") from None
        return self.vectors[rows].astype(np.float64)


def embed(extractor, images) -> np.ndarray:
    """Fixed-dimension feature vectors for a batch of images."""
    if isinstance(extractor, ExternalFeatures):
        raise ConfigError("external features are looked up by id, not embedded")
    return extractor.transform(images)


def write_features(path, vectors, ids) -> None:
    """Header (u32 n, u32 dim), float32 LE rows; ids in a JSON sidecar."""
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise ConfigError("feature array must be 2-D")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())
    with open(path.with_suffix(path.suffix + ".ids.json"), "w") as f:
        json.dump(list(ids), f)


def read_features(path) -> ExternalFeatures:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated feature file")
    n, dim = struct.unpack("<II", blob[:8])
    if len(blob) != 8 + n * dim * 4:
        raise FormatError(f"{path}: size does not match header ({n}, {dim})")
    vectors = np.frombuffer(blob[8:], dtype="<f4").reshape(n, dim)
    with open(path.with_suffix(path.suffix + ".ids.json")) as f:
        ids = json.load(f)
    return ExternalFeatures(vectors=vectors.copy(), ids=ids)


# --------------------------------------------------------------------------
# distances and diversity
# --------------------------------------------------------------------------

def domain_distance(extractor, images_a, images_b, n_samples: int = 50,
                    seed: int = 0) -> tuple[float, bool]:
    """L2 distance between mean embeddings of two sampled image sets.

    Samples ``n_samples`` images from each set without replacement; sets
    smaller than that are used whole and flagged (second return value).
    """
    images_a = check_images(images_a)
    images_b = check_images(images_b)
    if len(images_a) == 0 or len(images_b) == 0:
        raise ConfigError("cannot measure the distance of an empty set")
    undersized = len(images_a) < n_samples or len(images_b) < n_samples

    def pick(images):
        if len(images) <= n_samples:
            return images
        # subsample seeded by set content so the distance is exactly symmetric
        tag = zlib.crc32(np.ascontiguousarray(images, dtype="<f4").tobytes())
        rng = np.random.default_rng([seed, tag])
        idx = rng.choice(len(images), size=n_samples, replace=False)
        return images[idx]

    fa = embed(extractor, pick(images_a))
    fb = embed(extractor, pick(images_b))
    return float(np.linalg.norm(fa.mean(axis=0) - fb.mean(axis=0))), undersized


def feature_distance(features_a, features_b) -> float:
    """Distance between mean vectors of precomputed embeddings."""
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    return float(np.linalg.norm(fa.mean(axis=0) - fb.mean(axis=0)))


def diversity_stats(features) -> tuple[float, float]:
    """(mean pairwise cosine similarity, mean per-dimension variance) of one
    prompt's image group."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise ConfigError("need at least two feature vectors")
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0):
        raise ConfigError("zero-norm embedding in cosine similarity")
    unit = f / norms[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(len(f), k=1)
    mean_cos = float(sim[iu].mean())
    mean_var = float(f.var(axis=0, ddof=0).mean())
    return mean_cos, mean_var


def diversity_report(groups_by_producer: dict[str, list[np.ndarray]]) -> dict:
    """Per-producer diversity table: mean +/- sd of both statistics across
    prompt groups."""
    rows = {}
    for producer, groups in groups_by_producer.items():
        cos, var = [], []
        for g in groups:
            c, v = diversity_stats(g)
            cos.append(c)
            var.append(v)
        rows[producer] = {
            "mean_cosine": float(np.mean(cos)),
            "sd_cosine": float(np.std(cos)),
            "mean_variance": float(np.mean(var)),
            "sd_variance": float(np.std(var)),
            "n_groups": len(groups),
        }
    return rows


def gap_vs_gain_report(rows) -> dict:
    """Pair domain distances with reweighting gains.

    ``rows`` is a list of (label, distance, gain) triples; the Pearson
    correlation is reported as None when either side has no variance.
    """
    rows = [(str(l), float(d), float(g)) for l, d, g in rows]
    if not rows:
        raise ConfigError("no (label, distance, gain) rows supplied")
    table = [{"dataset": l, "distance": d, "delta_accuracy": g}
             for l, d, g in rows]
    r = None
    if len(rows) >= 3:
        d = np.array([x[1] for x in rows])
        g = np.array([x[2] for x in rows])
        if d.std() > 0 and g.std() > 0:
            dc, gc = d - d.mean(), g - g.mean()
            r = float((dc * gc).sum()
                      / (np.sqrt((dc * dc).sum()) * np.sqrt((gc * gc).sum())))
    return {"rows": table, "pearson_r": r, "n": len(rows)}

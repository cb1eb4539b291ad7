"""Static anchors (per-class k-means centroids for images, template means for
text) and per-batch stochastic anchors."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .core import AnchorError, ClusterError, ShapeError, l2_normalize, pairwise_sq_dists
from .dataio import EmbeddingSet, Modality, make_embedding_set, read_embeddings, write_embeddings

ANCHOR_NAME_PREFIX = "anchor:"

Encoder = Callable[[np.ndarray], np.ndarray]


class AnchorKind(Enum):
    STATIC = "static"
    STOCHASTIC = "stochastic"


@dataclass
class AnchorSet:
    """Anchor vectors for one modality; static sets hold exactly one
    unit-norm anchor per class, ordered by class id."""

    vectors: np.ndarray  # (K, H) static, (B, H) stochastic
    modality: Modality
    kind: AnchorKind
    class_names: list[str] | None = None

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def validate(self) -> None:
        if self.kind is AnchorKind.STATIC:
            if self.class_names is not None and len(self.class_names) != len(self):
                raise AnchorError("static anchor count does not match class names")
            norms = np.linalg.norm(self.vectors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise AnchorError("static anchors must be unit-normalized")


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (m, H)
    assignments: np.ndarray  # (N,)
    objective: float
    iterations_run: int
    objective_history: list[float] = field(default_factory=list)


def _kmeanspp_seed(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((m, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = pairwise_sq_dists(points, centroids[:1]).ravel()
    for j in range(1, m):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, pairwise_sq_dists(points, centroids[j:j + 1]).ravel())
    return centroids


def kmeans(points: np.ndarray, m: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Points are sorted lexicographically before seeding so the result is
    invariant to input order. Empty clusters are re-seeded to the point
    farthest from the cluster's former centroid. The per-iteration
    objective (sum of squared distances to assigned centroids) is
    non-increasing and recorded in ``objective_history``.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ClusterError("points must be a 2-D array")
    n = points.shape[0]
    if m < 1:
        raise ClusterError("m must be >= 1")
    if n < m:
        raise ClusterError(f"need at least {m} points, got {n}")

    order = np.lexsort(points.T[::-1])
    points = points[order]
    centroids = _kmeanspp_seed(points, m, rng)

    history: list[float] = []
    assignments = np.zeros(n, dtype=np.int64)
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = pairwise_sq_dists(points, centroids)
        assignments = np.argmin(d2, axis=1)
        objective = float(d2[np.arange(n), assignments].sum())
        if history and objective > history[-1] + 1e-9:
            raise ClusterError("k-means objective increased; numerical fault")
        history.append(objective)

        new_centroids = centroids.copy()
        claimed: list[int] = []
        for j in range(m):
            members = assignments == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
            else:
                dist = pairwise_sq_dists(points, centroids[j:j + 1]).ravel()
                dist[claimed] = -np.inf
                far = int(np.argmax(dist))
                claimed.append(far)
                new_centroids[j] = points[far]
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if movement < tol:
            break

    d2 = pairwise_sq_dists(points, centroids)
    assignments = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(n), assignments].sum())
    history.append(objective)

    inverse = np.empty_like(order)
    inverse[order] = np.arange(n)
    return KMeansResult(centroids=centroids, assignments=assignments[inverse],
                        objective=objective, iterations_run=iterations,
                        objective_history=history)


# ---------------------------------------------------------------------------
# Static anchor construction


def _encode(encoder: Encoder | None, vectors: np.ndarray) -> np.ndarray:
    return vectors if encoder is None else encoder(vectors)


def build_static_image_anchors(emb_set: EmbeddingSet, encoder: Encoder | None,
                               rng: np.random.Generator,
                               centroids_per_class: int = 1) -> AnchorSet:
    """Per class: encode all image records, k-means them, and keep one
    normalized representative (the centroid nearest the class mean when
    centroids_per_class > 1)."""
    anchors = np.empty((emb_set.num_classes, emb_set.dim))
    image_mask = emb_set.modality_mask(Modality.IMAGE)
    for c, name in enumerate(emb_set.class_names):
        feats = emb_set.vectors[image_mask & (emb_set.class_ids == c)]
        if feats.shape[0] == 0:
            raise ClusterError(f"class {name} has no image records")
        feats = _encode(encoder, feats)
        result = kmeans(feats, centroids_per_class, rng)
        if centroids_per_class == 1:
            representative = result.centroids[0]
        else:
            mean = feats.mean(axis=0)
            nearest = int(np.argmin(pairwise_sq_dists(result.centroids, mean[None, :]).ravel()))
            representative = result.centroids[nearest]
        anchors[c] = l2_normalize(representative)
    return AnchorSet(anchors, Modality.IMAGE, AnchorKind.STATIC,
                     class_names=list(emb_set.class_names))


def build_static_text_anchors(emb_set: EmbeddingSet, encoder: Encoder | None = None) -> AnchorSet:
    """Per class: normalized mean of the encoded text (template) records."""
    anchors = np.empty((emb_set.num_classes, emb_set.dim))
    text_mask = emb_set.modality_mask(Modality.TEXT)
    for c, name in enumerate(emb_set.class_names):
        feats = emb_set.vectors[text_mask & (emb_set.class_ids == c)]
        if feats.shape[0] == 0:
            raise AnchorError(f"class {name} has no text records")
        anchors[c] = l2_normalize(_encode(encoder, feats).mean(axis=0))
    return AnchorSet(anchors, Modality.TEXT, AnchorKind.STATIC,
                     class_names=list(emb_set.class_names))


def stochastic_anchor_batch(batch_images: np.ndarray, batch_texts: np.ndarray
                            ) -> tuple[AnchorSet, AnchorSet]:
    """Tag the index-paired batch features themselves as this iteration's anchors."""
    batch_images = np.asarray(batch_images, dtype=np.float64)
    batch_texts = np.asarray(batch_texts, dtype=np.float64)
    if batch_images.shape != batch_texts.shape:
        raise ShapeError(f"unpaired batch shapes {batch_images.shape} vs {batch_texts.shape}")
    return (AnchorSet(batch_images, Modality.IMAGE, AnchorKind.STOCHASTIC),
            AnchorSet(batch_texts, Modality.TEXT, AnchorKind.STOCHASTIC))


# ---------------------------------------------------------------------------
# Serialization: anchors ride in CEMB files with a reserved name prefix.


def write_anchors(path: str | Path, text_anchors: AnchorSet | None = None,
                  image_anchors: AnchorSet | None = None) -> None:
    sets = [a for a in (text_anchors, image_anchors) if a is not None]
    if not sets:
        raise AnchorError("nothing to write")
    names = sets[0].class_names
    if names is None:
        raise AnchorError("static anchors need class names to be serialized")
    for a in sets:
        a.validate()
        if a.kind is not AnchorKind.STATIC:
            raise AnchorError("only static anchors are serializable")
        if a.class_names != names:
            raise AnchorError("anchor sets disagree on class names")
    vectors = np.concatenate([a.vectors for a in sets])
    class_ids = np.concatenate([np.arange(len(a)) for a in sets])
    modalities = np.concatenate([np.full(len(a), int(a.modality), dtype=np.uint8) for a in sets])
    emb = make_embedding_set(
        vectors, class_ids, modalities,
        np.zeros(len(class_ids), dtype=np.uint8), np.zeros(len(class_ids), dtype=np.int64),
        [ANCHOR_NAME_PREFIX + n for n in names])
    write_embeddings(emb, path)


def read_anchors(path: str | Path) -> tuple[AnchorSet | None, AnchorSet | None]:
    """Returns (text_anchors, image_anchors); either may be absent."""
    emb = read_embeddings(path)
    names = []
    for n in emb.class_names:
        if not n.startswith(ANCHOR_NAME_PREFIX):
            raise AnchorError(f"{path}: class {n!r} lacks the {ANCHOR_NAME_PREFIX!r} prefix")
        names.append(n[len(ANCHOR_NAME_PREFIX):])

    def extract(modality: Modality) -> AnchorSet | None:
        mask = emb.modality_mask(modality)
        if not mask.any():
            return None
        ids = emb.class_ids[mask]
        if sorted(ids.tolist()) != list(range(emb.num_classes)):
            raise AnchorError(f"{path}: expected exactly one {modality.name.lower()} anchor per class")
        vectors = np.empty((emb.num_classes, emb.dim))
        vectors[ids] = l2_normalize(emb.vectors[mask])
        anchor_set = AnchorSet(vectors, modality, AnchorKind.STATIC, class_names=names)
        anchor_set.validate()
        return anchor_set

    return extract(Modality.TEXT), extract(Modality.IMAGE)

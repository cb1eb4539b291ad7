"""Synthetic dual-modality embedding sets, class splits, few-shot sampling,
and the CEMB on-disk format.

CEMB layout (little-endian):
    magic  b"CEMB"
    u32    version (1)
    u32    record count
    u32    dim
    u32    num_classes
    per class name: u16 byte length + UTF-8 bytes
    per record: u32 class_id, u8 modality (0=image, 1=text),
                u8 domain (0=in-domain, 1=out-of-domain), u16 group_id,
                dim * float32 vector
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import ConfigError, FormatError, SplitError, l2_normalize, make_rng

CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1
LOAD_NORM_TOL = 1e-5


class Modality(IntEnum):
    IMAGE = 0
    TEXT = 1


class Domain(IntEnum):
    IN_DOMAIN = 0
    OUT_OF_DOMAIN = 1


@dataclass
class EmbeddingRecord:
    """One labeled, modality- and domain-tagged unit vector."""

    vector: np.ndarray
    class_id: int
    modality: Modality
    domain: Domain
    group_id: int = 0


@dataclass
class EmbeddingSet:
    """Columnar store of embedding records sharing one dimension and vocabulary."""

    vectors: np.ndarray  # (N, H) float64, rows unit-normalized
    class_ids: np.ndarray  # (N,) int64
    modalities: np.ndarray  # (N,) uint8
    domains: np.ndarray  # (N,) uint8
    group_ids: np.ndarray  # (N,) int64
    class_names: list[str]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def record(self, i: int) -> EmbeddingRecord:
        return EmbeddingRecord(
            vector=self.vectors[i],
            class_id=int(self.class_ids[i]),
            modality=Modality(int(self.modalities[i])),
            domain=Domain(int(self.domains[i])),
            group_id=int(self.group_ids[i]),
        )

    def records(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def subset(self, mask: np.ndarray, class_names: list[str] | None = None,
               class_ids: np.ndarray | None = None) -> "EmbeddingSet":
        return EmbeddingSet(
            vectors=self.vectors[mask],
            class_ids=self.class_ids[mask] if class_ids is None else class_ids,
            modalities=self.modalities[mask],
            domains=self.domains[mask],
            group_ids=self.group_ids[mask],
            class_names=list(self.class_names) if class_names is None else class_names,
            metadata=dict(self.metadata),
        )

    def modality_mask(self, modality: Modality) -> np.ndarray:
        return self.modalities == int(modality)

    def image_vectors(self) -> np.ndarray:
        return self.vectors[self.modality_mask(Modality.IMAGE)]

    def validate(self) -> None:
        n = len(self)
        for arr, name in ((self.class_ids, "class_ids"), (self.modalities, "modalities"),
                          (self.domains, "domains"), (self.group_ids, "group_ids")):
            if arr.shape != (n,):
                raise FormatError(f"{name} length {arr.shape} does not match {n} records")
        if n and (self.class_ids.min() < 0 or self.class_ids.max() >= self.num_classes):
            raise FormatError("class_id outside declared class vocabulary")
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.where(np.abs(norms - 1.0) > LOAD_NORM_TOL)[0]
        if bad.size:
            raise FormatError(f"record {bad[0]} is not unit-normalized (norm {norms[bad[0]]:.6f})")


def make_embedding_set(vectors, class_ids, modalities, domains, group_ids,
                       class_names, metadata=None) -> EmbeddingSet:
    return EmbeddingSet(
        vectors=np.asarray(vectors, dtype=np.float64).reshape(len(class_ids), -1),
        class_ids=np.asarray(class_ids, dtype=np.int64),
        modalities=np.asarray(modalities, dtype=np.uint8),
        domains=np.asarray(domains, dtype=np.uint8),
        group_ids=np.asarray(group_ids, dtype=np.int64),
        class_names=list(class_names),
        metadata=metadata or {},
    )


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for a dual-modality embedding dataset.

    Per class a latent mean is drawn uniformly on the unit sphere; image and
    text samples are noisy, modality-offset copies of it. The target set
    rotates and translates the image means by ``domain_shift_magnitude``
    before sampling and is tagged out-of-domain. With
    ``group_spurious_strength > 0`` one designated coordinate is correlated
    with the class label for a ``majority_fraction`` of image samples
    (group 0) and anti-correlated for the rest (group 1).
    """

    num_classes: int
    dim: int
    samples_per_class_per_modality: int
    cluster_spread: float
    cross_modal_noise: float
    domain_shift_magnitude: float = 0.0
    group_spurious_strength: float = 0.0
    majority_fraction: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if self.samples_per_class_per_modality < 1:
            raise ConfigError("samples_per_class_per_modality must be >= 1")
        for name in ("cluster_spread", "cross_modal_noise", "domain_shift_magnitude",
                     "group_spurious_strength", "majority_fraction"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ConfigError(f"{name} must be finite")
        if self.cluster_spread <= 0:
            raise ConfigError("cluster_spread must be > 0")
        if self.cross_modal_noise < 0 or self.domain_shift_magnitude < 0:
            raise ConfigError("noise and shift magnitudes must be >= 0")
        if not 0.0 <= self.group_spurious_strength <= 1.0:
            raise ConfigError("group_spurious_strength must be in [0, 1]")
        if not 0.0 < self.majority_fraction < 1.0:
            raise ConfigError("majority_fraction must be in (0, 1)")


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    return l2_normalize(rng.standard_normal(dim))


def _block_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    """Orthogonal map rotating every vector by ``angle`` radians: Givens
    rotations in floor(dim/2) planes of one random orthonormal basis.
    ``angle = 0`` returns the exact identity."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    rot = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(0, dim - 1, 2):
        q1, q2 = q[:, i], q[:, i + 1]
        rot += ((c - 1.0) * (np.outer(q1, q1) + np.outer(q2, q2))
                + s * (np.outer(q2, q1) - np.outer(q1, q2)))
    return rot


def _sample_modality(rng, means, offset, noise_scale, cfg, domain, with_groups):
    """Draw per-class samples around ``means + offset``; returns columnar arrays."""
    k, h = means.shape
    n = cfg.samples_per_class_per_modality
    vectors, class_ids, group_ids = [], [], []
    half = (k + 1) // 2
    for c in range(k):
        raw = means[c] + offset + noise_scale * rng.standard_normal((n, h))
        groups = np.zeros(n, dtype=np.int64)
        if with_groups and cfg.group_spurious_strength > 0:
            majority = rng.random(n) < cfg.majority_fraction
            groups = np.where(majority, 0, 1)
            class_sign = 1.0 if c < half else -1.0
            sample_sign = np.where(majority, 1.0, -1.0)
            raw[:, -1] += cfg.group_spurious_strength * class_sign * sample_sign
        vectors.append(l2_normalize(raw))
        class_ids.append(np.full(n, c, dtype=np.int64))
        group_ids.append(groups)
    count = k * n
    return (np.concatenate(vectors), np.concatenate(class_ids),
            np.full(count, int(domain), dtype=np.uint8), np.concatenate(group_ids))


def generate_synthetic(cfg: SyntheticConfig) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Generate an in-domain source set and a domain-shifted target set.

    Image clusters sit at the latent means; text clusters at a global
    rotation of them (angle ``cross_modal_noise``), so the cross-modal gap
    is a class-agnostic linear map. Both sets carry image and text records;
    each set's effective image means live in ``metadata["class_means"]``
    (text means in ``metadata["text_means"]``) for oracle tests.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    k, h = cfg.num_classes, cfg.dim
    means = l2_normalize(rng.standard_normal((k, h)))
    image_offset = 0.5 * cfg.cluster_spread * _random_unit(rng, h)
    text_offset = 0.5 * cfg.cross_modal_noise * _random_unit(rng, h)
    text_means = means @ _block_rotation(rng, h, cfg.cross_modal_noise).T
    shift = _block_rotation(rng, h, cfg.domain_shift_magnitude)
    translation = 0.5 * cfg.domain_shift_magnitude * _random_unit(rng, h)
    target_means = means @ shift.T + translation

    class_names = [f"class_{c:03d}" for c in range(k)]

    def build(image_means, domain):
        iv, ic, idom, ig = _sample_modality(rng, image_means, image_offset,
                                            cfg.cluster_spread, cfg, domain, True)
        tv, tc, tdom, tg = _sample_modality(rng, text_means, text_offset,
                                            cfg.cross_modal_noise, cfg, domain, False)
        vectors = np.concatenate([iv, tv])
        modalities = np.concatenate([
            np.full(len(ic), int(Modality.IMAGE), dtype=np.uint8),
            np.full(len(tc), int(Modality.TEXT), dtype=np.uint8),
        ])
        return make_embedding_set(
            vectors, np.concatenate([ic, tc]), modalities,
            np.concatenate([idom, tdom]), np.concatenate([ig, tg]), class_names,
            metadata={"class_means": image_means.copy(), "text_means": text_means.copy(),
                      "image_offset": image_offset.copy(), "text_offset": text_offset.copy()},
        )

    source = build(means, Domain.IN_DOMAIN)
    target = build(target_means, Domain.OUT_OF_DOMAIN)
    return source, target


# ---------------------------------------------------------------------------
# Splits and sampling


def split_base_novel(emb_set: EmbeddingSet, base_fraction: float) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Partition classes deterministically: sorted class order, first
    ceil(base_fraction * K) classes to the base split. Class IDs are
    reindexed densely within each split."""
    k = emb_set.num_classes
    if k < 2:
        raise SplitError("need at least 2 classes to split")
    if not 0.0 < base_fraction < 1.0:
        raise SplitError("base_fraction must be in (0, 1)")
    n_base = math.ceil(base_fraction * k)
    if n_base >= k:
        n_base = k - 1

    def take(class_range):
        lo, hi = class_range
        mask = (emb_set.class_ids >= lo) & (emb_set.class_ids < hi)
        return emb_set.subset(mask, class_names=emb_set.class_names[lo:hi],
                              class_ids=emb_set.class_ids[mask] - lo)

    return take((0, n_base)), take((n_base, k))


def few_shot_split(emb_set: EmbeddingSet, shots: int, rng: np.random.Generator
                   ) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Sample min(shots, available) records per class and modality without
    replacement; returns (sampled, held-out remainder)."""
    if shots < 1:
        raise ConfigError("shots must be >= 1")
    chosen = np.zeros(len(emb_set), dtype=bool)
    warnings: list[str] = []
    for c in range(emb_set.num_classes):
        for modality in (Modality.IMAGE, Modality.TEXT):
            idx = np.where((emb_set.class_ids == c) & emb_set.modality_mask(modality))[0]
            if idx.size == 0:
                warnings.append(f"class {emb_set.class_names[c]} has no {modality.name.lower()} records")
                continue
            take = min(shots, idx.size)
            pick = rng.choice(idx.size, size=take, replace=False)
            chosen[idx[np.sort(pick)]] = True
    sampled = emb_set.subset(chosen)
    heldout = emb_set.subset(~chosen)
    if warnings:
        sampled.metadata = dict(sampled.metadata, warnings=warnings)
    return sampled, heldout


def few_shot_sample(emb_set: EmbeddingSet, shots: int, rng: np.random.Generator) -> EmbeddingSet:
    """The sampled half of :func:`few_shot_split`."""
    return few_shot_split(emb_set, shots, rng)[0]


# ---------------------------------------------------------------------------
# CEMB reader / writer

_HEADER = struct.Struct("<4sIIII")
_REC_HEAD = struct.Struct("<IBBH")


def write_embeddings(emb_set: EmbeddingSet, path: str | Path) -> None:
    """Serialize to CEMB. Vectors are narrowed to float32."""
    emb_set.validate()
    out = bytearray()
    out += _HEADER.pack(CEMB_MAGIC, CEMB_VERSION, len(emb_set), emb_set.dim,
                        emb_set.num_classes)
    for name in emb_set.class_names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"class name too long ({len(raw)} bytes)")
        out += struct.pack("<H", len(raw)) + raw
    vectors32 = emb_set.vectors.astype("<f4")
    for i in range(len(emb_set)):
        gid = int(emb_set.group_ids[i])
        if not 0 <= gid <= 0xFFFF:
            raise FormatError(f"group_id {gid} does not fit in u16")
        out += _REC_HEAD.pack(int(emb_set.class_ids[i]), int(emb_set.modalities[i]),
                              int(emb_set.domains[i]), gid)
        out += vectors32[i].tobytes()
    Path(path).write_bytes(bytes(out))


def read_embeddings(path: str | Path) -> EmbeddingSet:
    """Parse a CEMB file; malformed input raises FormatError with a byte offset."""
    data = Path(path).read_bytes()
    off = 0

    def need(n: int, what: str) -> int:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"truncated file: need {n} bytes for {what} at offset {off}")
        start = off
        off += n
        return start

    magic, version, count, dim, num_classes = _HEADER.unpack_from(
        data, need(_HEADER.size, "header"))
    if magic != CEMB_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != CEMB_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    class_names = []
    for _ in range(num_classes):
        (length,) = struct.unpack_from("<H", data, need(2, "class-name length"))
        start = need(length, "class-name bytes")
        class_names.append(data[start:start + length].decode("utf-8"))

    vectors = np.empty((count, dim), dtype=np.float64)
    class_ids = np.empty(count, dtype=np.int64)
    modalities = np.empty(count, dtype=np.uint8)
    domains = np.empty(count, dtype=np.uint8)
    group_ids = np.empty(count, dtype=np.int64)
    vec_bytes = 4 * dim
    for i in range(count):
        at = need(_REC_HEAD.size, f"record {i} header")
        cid, mod, dom, gid = _REC_HEAD.unpack_from(data, at)
        if cid >= num_classes:
            raise FormatError(f"record {i}: class_id {cid} >= num_classes {num_classes} at offset {at}")
        if mod not in (0, 1):
            raise FormatError(f"record {i}: bad modality byte {mod} at offset {at + 4}")
        if dom not in (0, 1):
            raise FormatError(f"record {i}: bad domain byte {dom} at offset {at + 5}")
        start = need(vec_bytes, f"record {i} vector")
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=start)
        class_ids[i] = cid
        modalities[i] = mod
        domains[i] = dom
        group_ids[i] = gid
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes at offset {off}")

    result = EmbeddingSet(vectors, class_ids, modalities, domains, group_ids,
                          class_names)
    result.validate()
    return result

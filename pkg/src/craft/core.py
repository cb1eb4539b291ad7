"""Shared vector math, error types, and seeded random-number plumbing.

Everything downstream computes in float64; file formats narrow to float32
on disk (see dataio).
"""

from __future__ import annotations

import numpy as np

# ---------------------------------------------------------------------------
# Error hierarchy. ``exit_code`` is what the CLI returns when the error
# escapes to the top level (2 config, 3 data, 4 numeric).


class CraftError(Exception):
    exit_code = 3


class ConfigError(CraftError):
    exit_code = 2


class ScheduleError(ConfigError):
    pass


class NumericError(CraftError):
    exit_code = 4


class NormalizationError(NumericError):
    pass


class ShapeError(CraftError):
    pass


class FormatError(CraftError):
    pass


class SplitError(CraftError):
    pass


class ClusterError(CraftError):
    pass


class AnchorError(CraftError):
    pass


class LabelError(CraftError):
    pass


class EvalError(CraftError):
    pass


# ---------------------------------------------------------------------------
# Random numbers. A single documented generator (PCG64) seeded explicitly;
# no global state anywhere in the library. ``stream`` derives independent
# substreams from one user-facing seed (e.g. shuffling vs. target sampling).


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for ``seed`` and an optional substream key."""
    entropy = [int(seed), *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# Vector math


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` (a vector, or a matrix row-wise) to unit Euclidean norm.

    Raises NormalizationError on an exactly-zero vector.
    """
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise NormalizationError("cannot normalize a zero vector")
    return v / norms


def inner_product(u: np.ndarray, v: np.ndarray) -> float:
    """Euclidean dot product of two equal-dimension vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max-subtracted) over a 1-D array of finite logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise NumericError("softmax of empty logits")
    if not np.all(np.isfinite(logits)):
        raise NumericError("softmax of non-finite logits")
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a 2-D logit matrix, max-subtracted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """All squared Euclidean distances between rows of ``x`` (m,d) and ``y`` (n,d).

    Computed elementwise (not via the x^2+y^2-2xy trick) so that
    ``result[i, j]`` is bitwise equal under swapping the two inputs.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    diff = x[:, None, :] - y[None, :, :]
    return np.sum(diff * diff, axis=2)

"""SGD training over paired dual-modality batches: cosine-annealed learning
rate, seeded shuffling and pairing, and per-mode loss composition."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapter import Adapter
from .anchors import AnchorSet
from .core import ConfigError, ScheduleError, ShapeError, make_rng
from .dataio import EmbeddingSet, Modality
from .losses import GradientVector, LossBatch, LossConfig, Mode, loss_and_gradient
from .mmd import KernelSpec, anchor_align, median_heuristic

# Appendix-style defaults: lr is tied to batch size unless set explicitly.
DEFAULT_LEARNING_RATES = {4: 0.0025, 128: 0.01}


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float | None = None
    temperature: float = 30.0
    w_static: float = 1.0
    w_stochastic: float = 1.0
    w_mmd: float = 1.0
    shots: int = 16
    seed: int = 0
    mode: Mode = Mode.ALIGNED
    bandwidth: float | None = None  # None: median heuristic at each evaluation
    freeze_bandwidth: bool = False  # capture the heuristic once, on the first batch

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        try:
            return DEFAULT_LEARNING_RATES[self.batch_size]
        except KeyError:
            raise ConfigError(
                f"no default learning rate for batch_size {self.batch_size}; set learning_rate"
            ) from None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.resolved_learning_rate() <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    total: float
    static_term: float
    stochastic_term: float
    mmd_term: float
    train_accuracy: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "learning_rate": self.learning_rate,
                "total": self.total, "static_term": self.static_term,
                "stochastic_term": self.stochastic_term, "mmd_term": self.mmd_term,
                "train_accuracy": self.train_accuracy}


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "TrainHistory":
        records = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                records.append(EpochRecord(**json.loads(line)))
        return cls(records)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine annealing: base_lr at epoch 0, zero at epoch total_epochs."""
    if total_epochs < 1:
        raise ScheduleError("total_epochs must be >= 1")
    if epoch < 0 or epoch > total_epochs:
        raise ScheduleError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def sgd_step(adapter: Adapter, gradient: GradientVector, lr: float) -> Adapter:
    """One plain SGD update; returns a new adapter."""
    if gradient.layout.dim != adapter.dim or gradient.values.shape != (adapter.layout.size,):
        raise ShapeError(f"gradient layout (dim {gradient.layout.dim}) does not match "
                         f"adapter (dim {adapter.dim})")
    return Adapter.from_flat(adapter.to_flat() - lr * gradient.values, adapter.dim)


def _pooled_records(source: EmbeddingSet, target: EmbeddingSet | None, mode: Mode
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Labeled image and text training pools; the oracle mode pools the target."""
    sets = [source]
    if mode is Mode.ORACLE:
        sets.append(target)
    img_vecs, img_labels, txt_vecs, txt_labels = [], [], [], []
    for s in sets:
        img = s.modality_mask(Modality.IMAGE)
        txt = s.modality_mask(Modality.TEXT)
        img_vecs.append(s.vectors[img])
        img_labels.append(s.class_ids[img])
        txt_vecs.append(s.vectors[txt])
        txt_labels.append(s.class_ids[txt])
    return (np.concatenate(img_vecs), np.concatenate(img_labels),
            np.concatenate(txt_vecs), np.concatenate(txt_labels))


def train(source: EmbeddingSet, target: EmbeddingSet | None,
          static_text_anchors: AnchorSet, static_image_anchors: AnchorSet,
          cfg: TrainConfig) -> tuple[Adapter, TrainHistory]:
    """Train a zero-initialized adapter on paired image/text batches.

    Per epoch: seeded shuffle of the image pool, each image paired with a
    same-class text record, mode-specific loss, SGD step at the epoch's
    cosine-annealed rate. Target batches for the MMD term come from an
    independent substream of the seed.
    """
    from .evaluation import accuracy  # local import; evaluation depends on losses

    cfg.validate()
    if cfg.mode in (Mode.ALIGNED_MMD, Mode.ORACLE) and target is None:
        raise ConfigError(f"mode {cfg.mode.value} requires a target set")

    img_vecs, img_labels, txt_vecs, txt_labels = _pooled_records(source, target, cfg.mode)
    n = img_vecs.shape[0]
    if n == 0:
        raise ConfigError("no image records to train on")
    text_pools = {c: np.where(txt_labels == c)[0] for c in np.unique(img_labels)}
    missing = [int(c) for c, pool in text_pools.items() if pool.size == 0]
    if missing:
        raise ConfigError(f"classes {missing} have image records but no text records")

    target_imgs = None
    if cfg.mode is Mode.ALIGNED_MMD:
        target_imgs = target.image_vectors()
        if target_imgs.shape[0] == 0:
            raise ConfigError("target set has no image records")

    rng = make_rng(cfg.seed, 0)
    rng_target = make_rng(cfg.seed, 1)
    lr0 = cfg.resolved_learning_rate()
    adapter = Adapter.zeros(source.dim)
    frozen_kernel = KernelSpec(cfg.bandwidth) if cfg.bandwidth is not None else None

    history = TrainHistory()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, lr0)
        perm = rng.permutation(n)
        paired = np.array([text_pools[c][rng.integers(text_pools[c].size)]
                           for c in img_labels[perm]])
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            batch = LossBatch(image=img_vecs[sel], text=txt_vecs[paired[start:start + cfg.batch_size]],
                              labels=img_labels[sel])
            kernel = None
            if cfg.mode is Mode.ALIGNED_MMD:
                take = min(len(sel), target_imgs.shape[0])
                batch.target_image = target_imgs[rng_target.choice(target_imgs.shape[0],
                                                                   size=take, replace=False)]
                kernel = frozen_kernel
                if kernel is None:
                    src_rows = anchor_align(adapter.encode_image(batch.image),
                                            static_text_anchors, cfg.temperature).rows
                    tgt_rows = anchor_align(adapter.encode_image(batch.target_image),
                                            static_text_anchors, cfg.temperature).rows
                    kernel = KernelSpec(median_heuristic(np.concatenate([src_rows, tgt_rows])))
                    if cfg.freeze_bandwidth:
                        frozen_kernel = kernel
            loss_cfg = LossConfig(mode=cfg.mode, temperature=cfg.temperature,
                                  w_static=cfg.w_static, w_stochastic=cfg.w_stochastic,
                                  w_mmd=cfg.w_mmd, kernel=kernel)
            report, grad = loss_and_gradient(adapter, batch, static_text_anchors,
                                             static_image_anchors, loss_cfg)
            adapter = sgd_step(adapter, grad, lr)
            sums += (report.total, report.static_term, report.stochastic_term, report.mmd_term)
            steps += 1
        train_acc = accuracy(adapter, source, static_text_anchors, cfg.temperature)
        history.records.append(EpochRecord(
            epoch=epoch, learning_rate=lr, total=sums[0] / steps,
            static_term=sums[1] / steps, stochastic_term=sums[2] / steps,
            mmd_term=sums[3] / steps, train_accuracy=train_acc))
    return adapter, history

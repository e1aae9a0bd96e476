"""Contrastive batching and the training loop."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .losses import LossConfig, batch_loss
from .model import CountingModel, ModelConfig, image_to_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "sgd"  # or "adam"
    momentum: float = 0.9
    contrastive: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    one_prompt_per_scene: bool = True
    augment: bool = True
    validate_every: int = 1
    schedule: str = "constant"  # or "cosine"
    clip_grad: float = 0.0  # max global grad norm, 0 disables
    # reject contrastive partners whose scene holds the prompted class
    exclude_same_class: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.contrastive and self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")


def _parse_value(raw: str):
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in raw:
        return tuple(_parse_value(v.strip()) for v in raw.split(",") if v.strip())
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def load_train_config(path=None, overrides: Dict[str, str] | None = None) -> TrainConfig:
    """Read ``key = value`` lines. ``loss.*`` and ``model.*`` keys address the
    nested records. ``PROMPTCOUNT_SEED`` in the environment overrides ``seed``."""
    items: Dict[str, str] = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                items[key.strip()] = value.strip()
    items.update(overrides or {})
    if "PROMPTCOUNT_SEED" in os.environ:
        items["seed"] = os.environ["PROMPTCOUNT_SEED"]

    top, loss, model = {}, {}, {}
    valid = {f.name for f in fields(TrainConfig)}
    for key, raw in items.items():
        value = _parse_value(raw)
        if key.startswith("loss."):
            loss[key[5:]] = value
        elif key.startswith("model."):
            model[key[6:]] = value if not isinstance(value, int) or key[6:] not in (
                "image_size", "feature_size") else (value, value)
        elif key in valid:
            top[key] = value
        else:
            raise ValueError(f"unknown training config key {key!r}")
    return TrainConfig(loss=LossConfig(**loss), model=ModelConfig(**model), **top)


def dump_train_config(cfg: TrainConfig) -> str:
    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, dict):
            lines += [f"{key}.{k} = {fmt(v)}" for k, v in value.items()]
        else:
            lines.append(f"{key} = {fmt(value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Contrastive batches
# ---------------------------------------------------------------------------


@dataclass
class ContrastiveItem:
    """Sample ``i`` (positive, left half) paired with sample ``j`` (right half)."""

    i: int
    j: int
    mask: np.ndarray  # (h, 2w): [m_i, 0]
    target: np.ndarray  # (h, 2w): [d_i, 0]
    features: Optional[torch.Tensor] = None  # (C, h, 2w) when features were supplied


def draw_partners(batch_size: int, rng: np.random.Generator,
                  forbidden: np.ndarray | None = None) -> np.ndarray:
    """For each i, a partner drawn uniformly from the batch excluding i.

    ``forbidden[i, j]`` rules out further pairs; a row with nothing left
    falls back to any ``j != i``.
    """
    if batch_size < 2:
        raise ValueError("contrastive batches need at least two samples")
    if forbidden is None:
        j = rng.integers(0, batch_size - 1, size=batch_size)
        return j + (j >= np.arange(batch_size))
    allowed = ~np.asarray(forbidden, dtype=bool) & ~np.eye(batch_size, dtype=bool)
    out = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        cand = np.flatnonzero(allowed[i])
        if cand.size == 0:
            cand = np.delete(np.arange(batch_size), i)
        out[i] = cand[rng.integers(cand.size)]
    return out


def same_class_pairs(samples: Sequence) -> np.ndarray:
    """``[i, j]`` is True when scene j contains the class prompted in sample i."""
    return np.array([[a.class_name in b.scene_classes for b in samples] for a in samples])


def make_contrastive_batch(samples: Sequence, rng: np.random.Generator,
                           features: Sequence[torch.Tensor] | None = None,
                           exclude_same_class: bool = False) -> List[ContrastiveItem]:
    forbidden = same_class_pairs(samples) if exclude_same_class else None
    partners = draw_partners(len(samples), rng, forbidden)
    items = []
    for i, j in enumerate(partners):
        si, sj = samples[i], samples[j]
        mask = np.concatenate([si.mask, np.zeros_like(sj.mask)], axis=-1)
        target = np.concatenate([si.density, np.zeros_like(sj.density)], axis=-1)
        feats = None
        if features is not None:
            feats = torch.cat([features[i], features[j]], dim=-1)
        items.append(ContrastiveItem(i, int(j), mask, target, feats))
    return items


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def stack_samples(samples: Sequence, dtype=torch.float32):
    images = torch.stack([image_to_tensor(s.image) for s in samples]).to(dtype)
    masks = torch.stack([torch.from_numpy(np.asarray(s.mask)) for s in samples]).to(dtype)
    dens = torch.stack([torch.from_numpy(np.asarray(s.density)) for s in samples]).to(dtype)
    return images, masks, dens


def _epoch_indices(samples: Sequence, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.one_prompt_per_scene:
        return rng.permutation(len(samples))
    by_scene: Dict[int, List[int]] = {}
    for idx, s in enumerate(samples):
        by_scene.setdefault(s.scene_id, []).append(idx)
    picks = [group[int(rng.integers(len(group)))] for group in by_scene.values()]
    return rng.permutation(np.asarray(picks))


def dihedral(x: torch.Tensor, k: int, flip: bool) -> torch.Tensor:
    """Rotate the two trailing axes by ``k`` quarter turns, then optionally mirror."""
    x = torch.rot90(x, k, dims=(-2, -1))
    return torch.flip(x, dims=(-1,)) if flip else x


def _side_by_side(pos: torch.Tensor, neg: torch.Tensor, left: torch.Tensor) -> torch.Tensor:
    # the positive half must not sit on a fixed side, or padding gives away which half to zero
    sel = left.view(-1, *([1] * (pos.ndim - 1)))
    return torch.cat([torch.where(sel, pos, neg), torch.where(sel, neg, pos)], dim=-1)


def _make_optimizer(model: CountingModel, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    val_mae: float = math.nan
    val_mse: float = math.nan

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{self.val_mae:.4f}\t{self.val_mse:.4f}"


def train(dataset: Sequence, config: TrainConfig = TrainConfig(),
          val: Sequence | None = None, model: CountingModel | None = None
          ) -> Tuple[CountingModel, List[EpochLog]]:
    """Train a counting model; returns the model and one log record per epoch.

    Fully determined by ``config.seed``. With ``config.contrastive`` every
    sample is paired with a random partner from its batch and trained on the
    width-concatenated features ``[F_i, F_j]`` with zero-padded mask and target.
    """
    from .evaluation import compute_metrics, predict_counts

    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = model or CountingModel(config.model)
    opt = _make_optimizer(model, config)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(config.epochs, 1))
             if config.schedule == "cosine" else None)
    images, masks, dens = stack_samples(dataset)
    history: List[EpochLog] = []

    for epoch in range(1, config.epochs + 1):
        model.train()
        order = _epoch_indices(dataset, config, rng)
        total, n = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            if config.contrastive and len(idx) < 2:
                continue
            x, m, d = images[idx], masks[idx], dens[idx]
            if config.augment:
                k, flip = int(rng.integers(4)), bool(rng.integers(2))
                x, m, d = (dihedral(t, k, flip) for t in (x, m, d))
            feats = model.encode(x)
            if config.contrastive:
                forbidden = (same_class_pairs([dataset[i] for i in idx.tolist()])
                             if config.exclude_same_class else None)
                j = torch.as_tensor(draw_partners(len(idx), rng, forbidden))
                left = torch.as_tensor(rng.random(len(idx)) < 0.5)
                feats = _side_by_side(feats, feats[j], left)
                m = _side_by_side(m, torch.zeros_like(m), left)
                d = _side_by_side(d, torch.zeros_like(d), left)
            loss = batch_loss(model, feats, m, d, config.loss)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            if config.clip_grad > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_grad)
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)

        if sched is not None:
            sched.step()
        rec = EpochLog(epoch, total / max(n, 1))
        if val is not None and (epoch % config.validate_every == 0 or epoch == config.epochs):
            met = compute_metrics(predict_counts(model, val, config.loss.eval_T),
                                  [s.count for s in val])
            rec.val_mae, rec.val_mse = met.mae, met.mse
        log.info("epoch %s", rec.line())
        history.append(rec)
    model.eval()
    return model, history


def write_log(history: Sequence[EpochLog], path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(rec.line() + "\n")

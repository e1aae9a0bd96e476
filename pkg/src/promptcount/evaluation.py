"""Counting metrics, negative-pair protocol, iteration sweep, cross-prompt report.

``MSE`` is reported under that name but is a root-mean-square error:
``sqrt(mean((pred - gt) ** 2))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .formats import write_pgm
from .model import CountingModel, refine_batch
from .synth import PROMPT_TYPES
from .training import stack_samples


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    n: int


def compute_metrics(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> Metrics:
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground-truth lists differ in length")
    if pred.size == 0:
        raise ValueError("cannot compute metrics on an empty list")
    err = pred - gt
    return Metrics(float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean())), int(pred.size))


@torch.no_grad()
def predict_iterates(model: CountingModel, samples: Sequence, T: int,
                     batch_size: int = 128) -> np.ndarray:
    """Predicted counts of every iterate, shape ``(len(samples), T)``."""
    dtype = next(model.parameters()).dtype
    out = []
    for start in range(0, len(samples), batch_size):
        images, masks, _ = stack_samples(samples[start:start + batch_size], dtype)
        feats = model.encode(images)
        its = refine_batch(model, feats, masks, T)
        out.append(torch.stack([d.sum((-2, -1)) for d in its], dim=1).double().numpy())
    return np.concatenate(out)


def predict_counts(model: CountingModel, samples: Sequence, T: int) -> np.ndarray:
    return predict_iterates(model, samples, T)[:, -1]


# ---------------------------------------------------------------------------
# Negative pairs
# ---------------------------------------------------------------------------


def make_negative_pairs(samples: Sequence, rng: np.random.Generator,
                        max_tries: int = 1000) -> List[Tuple[object, object]]:
    """One partner per sample, by seeded shuffle with class rejection.

    A partner qualifies only if the prompted class of the first sample does not
    occur anywhere in the partner's image.
    """
    pairs = []
    for a in samples:
        for _ in range(max_tries):
            b = samples[int(rng.integers(len(samples)))]
            if _is_negative(a, b):
                pairs.append((a, b))
                break
        else:
            raise ValueError(f"no negative partner found for scene {a.scene_id}")
    return pairs


def _is_negative(a, b) -> bool:
    if a.class_id == b.class_id:
        return False
    return a.class_name not in (b.scene_classes or (b.class_name,))


@torch.no_grad()
def negative_density(model: CountingModel, a, b, T: int = 1) -> torch.Tensor:
    """Density predicted on ``b``'s image for the prompt of ``a``.

    Features are concatenated ``[F_a, F_b]`` with mask ``[m_a, 0]`` exactly as
    in contrastive training, refined T times, and the right half returned.
    """
    dtype = next(model.parameters()).dtype
    images, masks, _ = stack_samples([a, b], dtype)
    feats = model.encode(images)
    joint = torch.cat([feats[0], feats[1]], dim=-1).unsqueeze(0)
    mask = torch.cat([masks[0], torch.zeros_like(masks[1])], dim=-1).unsqueeze(0)
    d = refine_batch(model, joint, mask, T)[-1][0]
    return d[:, feats.shape[-1]:]


def negative_eval(model: CountingModel | None, pairs: Sequence[Tuple[object, object]], T: int = 1,
                  predict: Callable | None = None) -> Metrics:
    """N-MAE / N-MSE: predicted count on the partner image against zero.

    ``predict(a, b) -> density`` overrides the model-based prediction.
    """
    for a, b in pairs:
        if not _is_negative(a, b):
            raise ValueError(f"pair ({a.scene_id}, {b.scene_id}) shares the prompted class")
    predict = predict or (lambda a, b: negative_density(model, a, b, T))
    preds = [float(np.asarray(predict(a, b), dtype=np.float64).sum()) for a, b in pairs]
    return compute_metrics(preds, [0.0] * len(preds))


# ---------------------------------------------------------------------------
# Sweeps and reports
# ---------------------------------------------------------------------------


def iteration_sweep(model: CountingModel, samples: Sequence, T_max: int) -> Dict[int, Metrics]:
    if T_max < 2:
        raise ValueError("T_max must be >= 2")
    per_iter = predict_iterates(model, samples, T_max)
    gt = [s.count for s in samples]
    return {t + 1: compute_metrics(per_iter[:, t], gt) for t in range(T_max)}


def format_sweep(table: Dict[int, Metrics]) -> str:
    lines = ["T\tMAE\tMSE"]
    lines += [f"{t}\t{m.mae:.2f}\t{m.mse:.2f}" for t, m in sorted(table.items())]
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    rows: Dict[str, Optional[Metrics]] = field(default_factory=dict)
    negative: Optional[Metrics] = None
    sweep: Optional[Dict[int, Metrics]] = None

    @property
    def average(self) -> Optional[Metrics]:
        present = [m for m in self.rows.values() if m is not None]
        if not present:
            return None
        return Metrics(float(np.mean([m.mae for m in present])),
                       float(np.mean([m.mse for m in present])),
                       int(sum(m.n for m in present)))

    def to_table(self) -> str:
        def row(name, m):
            if m is None:
                return f"{name}\t-\t-\t0"
            return f"{name}\t{m.mae:.2f}\t{m.mse:.2f}\t{m.n}"

        lines = ["prompt\tMAE\tMSE\tn"]
        lines += [row(p, self.rows.get(p)) for p in PROMPT_TYPES]
        lines.append(row("average", self.average))
        if self.negative is not None:
            lines.append(row("negative", self.negative))
        text = "\n".join(lines) + "\n"
        if self.sweep:
            text += "\n" + format_sweep(self.sweep)
        return text


def cross_prompt_eval(model: CountingModel, samples: Sequence, T: int) -> EvalReport:
    """One metrics row per prompt type; every present type covers the same scenes."""
    groups: Dict[str, List] = {p: [] for p in PROMPT_TYPES}
    for s in samples:
        groups.setdefault(s.prompt_type, []).append(s)
    scene_sets = {p: sorted(s.scene_id for s in g) for p, g in groups.items() if g}
    if len({tuple(v) for v in scene_sets.values()}) > 1:
        raise ValueError("prompt types are not evaluated on identical scenes")
    report = EvalReport()
    for p, group in groups.items():
        if not group:
            report.rows[p] = None
            continue
        group = sorted(group, key=lambda s: s.scene_id)
        report.rows[p] = compute_metrics(predict_counts(model, group, T), [s.count for s in group])
    return report


def render_density_image(density, path) -> None:
    """8-bit PGM, min-max normalised; the peak maps to 255.

    A zero-range map cannot be min-max normalised: an all-zero map is black,
    any other constant map is uniform mid-gray (128). The true count is
    written to ``<path>.count`` as ``count <value>``.
    """
    d = np.asarray(density.detach().cpu() if isinstance(density, torch.Tensor) else density,
                   dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if hi > lo:
        img = np.round((d - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(d.shape, 128.0 if hi != 0 else 0.0)
    write_pgm(img.astype(np.uint8), path)
    with open(f"{path}.count", "w") as fh:
        fh.write(f"count {d.sum():.6f}\n")

"""Procedural multi-class counting scenes with exact ground truth.

Objects are coloured Gaussian bumps with a class-specific ring texture on a
dark noisy background. Each scene yields one training sample per prompt type
(box, point, text) that share the image and ground-truth density.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .prompt_masks import (Box, EmbeddingBackend, MaskStrategy, Point,
                           box_to_mask, build_concept_dictionary, lemma, point_to_mask,
                           text_to_mask_cosine, text_to_mask_softmax)

BACKGROUND = (0.15, 0.15, 0.15)
PROMPT_TYPES = ("box", "point", "text")
DEFAULT_SIGMA = 2.0


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectClass:
    name: str
    color: Tuple[float, float, float]
    radius: float = 3.0
    texture_freq: float = 0.0
    count_range: Tuple[int, int] = (5, 20)
    placement: str = "uniform"  # or "clustered"


# Colour directions from the background are at most 0.71 cosine apart.
CLASS_POOL: Tuple[ObjectClass, ...] = (
    ObjectClass("cherry", (0.90, 0.15, 0.15), 3.0, 0.00),
    ObjectClass("pea", (0.15, 0.85, 0.15), 2.5, 0.35),
    ObjectClass("marble", (0.20, 0.30, 0.95), 3.5, 0.25),
    ObjectClass("lemon", (0.90, 0.85, 0.15), 3.5, 0.15),
    ObjectClass("grape", (0.80, 0.15, 0.85), 3.0, 0.30),
    ObjectClass("bead", (0.15, 0.80, 0.85), 2.5, 0.00),
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = (64, 64)
    classes: Tuple[ObjectClass, ...] = ()
    noise: float = 0.03
    min_distance: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise SceneError("a scene needs at least one object class")
        for c in self.classes:
            lo, hi = c.count_range
            if lo < 0 or hi < lo:
                raise SceneError(f"bad count range for {c.name}")
            if 2 * c.radius >= min(self.image_size):
                raise SceneError(f"{c.name} blobs do not fit in the image")


@dataclass
class SceneAnnotation:
    class_names: List[str]
    points: Dict[str, List[Tuple[float, float]]]
    boxes: Dict[str, Optional[Tuple[float, float, float, float]]]
    image_size: Tuple[int, int] = (64, 64)

    def count(self, name: str) -> int:
        return len(self.points.get(name, ()))

    @property
    def present(self) -> List[str]:
        return [n for n in self.class_names if self.count(n) > 0]


def pluralize(word: str) -> str:
    if word.endswith("y") and word[-2:-1] not in "aeiou":
        return word[:-1] + "ies"
    if word.endswith(("s", "x", "ch", "sh")):
        return word + "es"
    return word + "s"


def scene_caption(annotation: SceneAnnotation) -> str:
    """Stand-in for an image captioner: lists every present class."""
    parts = [f"{annotation.count(n)} {n if annotation.count(n) == 1 else pluralize(n)}"
             for n in annotation.present]
    if not parts:
        return "an empty background"
    listed = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
    return f"a photo of {listed} on a background"


def _place(cls: ObjectClass, n: int, placed: List[Tuple[float, float]], spec: SceneSpec,
           rng: np.random.Generator, max_tries: int = 200) -> List[Tuple[float, float]]:
    H, W = spec.image_size
    m = cls.radius
    out = []
    centre = rng.uniform([m, m], [W - m, H - m])
    for _ in range(n):
        for _ in range(max_tries):
            if cls.placement == "clustered":
                x, y = centre + rng.normal(0.0, min(H, W) / 6.0, size=2)
            else:
                x, y = rng.uniform(m, W - m), rng.uniform(m, H - m)
            if not (m <= x <= W - m and m <= y <= H - m):
                continue
            if all((x - px) ** 2 + (y - py) ** 2 >= spec.min_distance ** 2 for px, py in placed + out):
                out.append((float(x), float(y)))
                break
        else:
            raise SceneError("scene too dense")
    return out


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None
                   ) -> Tuple[np.ndarray, SceneAnnotation]:
    """Render a scene; returns a ``(H, W, 3)`` uint8 image and its annotation."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    H, W = spec.image_size
    img = np.empty((H, W, 3))
    img[:] = BACKGROUND
    img += rng.normal(0.0, spec.noise, size=img.shape)

    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    placed: List[Tuple[float, float]] = []
    points, boxes = {}, {}
    for cls in spec.classes:
        lo, hi = cls.count_range
        n = int(rng.integers(lo, hi + 1))
        pts = _place(cls, n, placed, spec, rng)
        placed += pts
        points[cls.name] = pts
        r = cls.radius
        boxes[cls.name] = ((pts[0][0] - r, pts[0][1] - r, pts[0][0] + r, pts[0][1] + r)
                           if pts else None)
        colour = np.asarray(cls.color)
        for x, y in pts:
            dist = np.hypot(xx - x, yy - y)
            alpha = np.exp(-2.0 * (dist / r) ** 2)
            if cls.texture_freq:
                alpha = alpha * (0.75 + 0.25 * np.cos(2 * np.pi * cls.texture_freq * dist))
            img = img * (1 - alpha[..., None]) + colour * alpha[..., None]

    image = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    ann = SceneAnnotation([c.name for c in spec.classes], points, boxes, (H, W))
    return image, ann


def render_gt_density(points: Sequence[Tuple[float, float]], sigma: float = DEFAULT_SIGMA,
                      size: Tuple[int, int] = (64, 64)) -> np.ndarray:
    """Sum of unit-mass Gaussians, each integrated exactly over its pixels.

    Pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``; mass falling outside the
    image is lost, so interior points contribute (almost exactly) one each.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    H, W = size
    out = np.zeros((H, W))
    s = sigma * np.sqrt(2.0)
    ey, ex = np.arange(H + 1, dtype=np.float64), np.arange(W + 1, dtype=np.float64)
    for x, y in points:
        gx = np.diff(0.5 * erf((ex - x) / s))
        gy = np.diff(0.5 * erf((ey - y) / s))
        out += np.outer(gy, gx)
    return out


def block_sum(grid: np.ndarray, factor: int) -> np.ndarray:
    H, W = grid.shape
    return grid.reshape(H // factor, factor, W // factor, factor).sum((1, 3))


# ---------------------------------------------------------------------------
# Deterministic embedding backend
# ---------------------------------------------------------------------------


class SyntheticBackend(EmbeddingBackend):
    """Frozen stand-in for a vision-language embedder on synthetic scenes.

    A patch is described by a colour histogram: every pixel votes for the
    palette class whose colour direction (relative to the background) it is
    closest to, weighted by how far it sits from the background. A constant
    background vote keeps empty patches well defined. The normalised
    histogram plus a shared offset is mapped to ``dim`` dimensions by a fixed
    random orthonormal projection, so class prototypes have pairwise cosine
    ``shared**2 / (1 + shared**2)``. Words outside the palette get a
    hash-seeded random direction. Read-only after construction.
    """

    def __init__(self, palette: Sequence[ObjectClass] = CLASS_POOL, dim: int = 64,
                 patch: int = 8, shared: float = 0.4, sharpness: float = 20.0,
                 threshold: float = 0.1, background_vote: float = 0.1, seed: int = 0):
        self.names = [lemma(c.name) for c in palette]
        self.patch = patch
        self.shared = shared
        self.sharpness = sharpness
        self.threshold = threshold
        self.background_vote = background_vote
        bg = np.asarray(BACKGROUND)
        dirs = np.stack([np.asarray(c.color) - bg for c in palette])
        self.directions = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        self.sig_dim = max(32, len(palette) + 2)
        self.bg_slot = len(palette)
        self.shared_slot = self.sig_dim - 1
        g = np.random.default_rng(seed).normal(size=(dim, self.sig_dim))
        self.projection, _ = np.linalg.qr(g)

    def _finish(self, sig: np.ndarray) -> np.ndarray:
        sig = sig / np.linalg.norm(sig, axis=-1, keepdims=True)
        sig = sig.copy()
        sig[..., self.shared_slot] += self.shared
        return sig @ self.projection.T

    def text_embed(self, text: str) -> np.ndarray:
        key = lemma(text.strip().lower())
        sig = np.zeros(self.sig_dim)
        if key in self.names:
            sig[self.names.index(key)] = 1.0
        elif key == "background":
            sig[self.bg_slot] = 1.0
        else:
            seed = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
            sig = np.random.default_rng(seed).normal(size=self.sig_dim)
            sig[self.shared_slot] = 0.0
        return self._finish(sig)

    def local_visual_embed(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.max() > 1.0:
            img = img / 255.0
        H, W, _ = img.shape
        diff = img - np.asarray(BACKGROUND)
        weight = np.linalg.norm(diff, axis=-1)
        cos = diff @ self.directions.T / np.maximum(weight, 1e-12)[..., None]
        logits = self.sharpness * cos
        votes = np.exp(logits - logits.max(-1, keepdims=True))
        votes /= votes.sum(-1, keepdims=True)
        votes *= np.clip(weight - self.threshold, 0.0, None)[..., None]
        p = self.patch
        hist = votes.reshape(H // p, p, W // p, p, -1).sum((1, 3))
        sig = np.zeros(hist.shape[:2] + (self.sig_dim,))
        sig[..., : hist.shape[-1]] = hist
        sig[..., self.bg_slot] = self.background_vote
        return self._finish(sig)


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


@dataclass
class TrainingSample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (h, w) float32
    density: np.ndarray  # (h, w) float32, ground truth at feature resolution
    class_name: str
    class_id: int
    prompt_type: str
    prompt: str = ""
    scene_id: int = 0
    scene_classes: Tuple[str, ...] = ()

    @property
    def count(self) -> float:
        return float(self.density.sum(dtype=np.float64))


def class_id(name: str) -> int:
    names = [c.name for c in CLASS_POOL]
    return names.index(name) if name in names else -1


def make_mask(image: np.ndarray, annotation: SceneAnnotation, class_name: str, prompt_type: str,
              rng: np.random.Generator, backend: EmbeddingBackend | None,
              feature_size: Tuple[int, int], strategy: MaskStrategy = MaskStrategy(),
              exemplar: int = 0) -> Tuple[np.ndarray, str]:
    """Prompt mask plus a textual form of the prompt that produced it."""
    H, W = image.shape[:2]
    if prompt_type in ("box", "point") and annotation.count(class_name) == 0:
        raise SceneError(f"class {class_name!r} has no instance to prompt")
    if prompt_type == "box":
        x0, y0, x1, y1 = annotation.boxes[class_name]
        box = Box(max(x0, 0.0), max(y0, 0.0), min(x1, W), min(y1, H))
        return box_to_mask(box, (H, W), feature_size), f"box:{box.x0},{box.y0},{box.x1},{box.y1}"
    if prompt_type == "point":
        pts = annotation.points[class_name]
        x, y = pts[int(rng.integers(len(pts)))]
        return point_to_mask(Point(x, y), (H, W), feature_size), f"point:{x},{y}"
    if prompt_type == "text":
        if backend is None:
            raise SceneError("text prompts need an embedding backend")
        if strategy.kind == "cosine":
            mask = text_to_mask_cosine(class_name, image, backend, feature_size)
        else:
            d = build_concept_dictionary(scene_caption(annotation), class_name)
            mask = text_to_mask_softmax(d, image, backend, strategy.tau, feature_size)
        return mask, f"text:{class_name}"
    raise SceneError(f"unknown prompt type {prompt_type!r}")


def make_sample(image: np.ndarray, annotation: SceneAnnotation, class_name: str,
                prompt_type: str, rng: np.random.Generator, backend: EmbeddingBackend | None,
                feature_size: Tuple[int, int] = (8, 8), strategy: MaskStrategy = MaskStrategy(),
                sigma: float = DEFAULT_SIGMA, scene_id: int = 0) -> TrainingSample:
    if class_name not in annotation.class_names:
        raise SceneError(f"class {class_name!r} not in scene")
    mask, prompt = make_mask(image, annotation, class_name, prompt_type, rng, backend,
                             feature_size, strategy)
    H, W = image.shape[:2]
    density = render_gt_density(annotation.points[class_name], sigma, (H, W))
    density = block_sum(density, H // feature_size[0])
    return TrainingSample(image, mask.astype(np.float32), density.astype(np.float32),
                          class_name, class_id(class_name), prompt_type, prompt, scene_id,
                          tuple(annotation.present))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 512
    n_val: int = 128
    image_size: Tuple[int, int] = (64, 64)
    feature_size: Tuple[int, int] = (8, 8)
    classes_per_scene: Tuple[int, int] = (2, 4)
    target_count: Tuple[int, int] = (5, 28)
    distractor_count: Tuple[int, int] = (0, 4)
    sigma: float = DEFAULT_SIGMA
    noise: float = 0.03
    seed: int = 0


def benchmark_scene_spec(cfg: BenchmarkConfig, rng: np.random.Generator, seed: int) -> SceneSpec:
    """Random scene: the first class is the prompted one, the rest are distractors."""
    lo, hi = cfg.classes_per_scene
    k = int(rng.integers(lo, hi + 1))
    picked = rng.choice(len(CLASS_POOL), size=k, replace=False)
    classes = []
    for i, idx in enumerate(picked):
        cr = cfg.target_count if i == 0 else cfg.distractor_count
        placement = "clustered" if rng.random() < 0.25 else "uniform"
        classes.append(replace(CLASS_POOL[idx], count_range=tuple(cr), placement=placement))
    return SceneSpec(cfg.image_size, tuple(classes), cfg.noise, seed=seed)


def make_split(cfg: BenchmarkConfig, n: int, seed: int, backend: EmbeddingBackend,
               strategy: MaskStrategy = MaskStrategy(), offset: int = 0,
               annotations: Dict[int, SceneAnnotation] | None = None) -> List[TrainingSample]:
    """``n`` benchmark scenes, three samples each; annotations are stored into
    ``annotations`` (keyed by scene id) when a dict is passed."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        spec = benchmark_scene_spec(cfg, rng, seed=int(rng.integers(2**31)))
        image, ann = generate_scene(spec, np.random.default_rng(spec.seed))
        target = spec.classes[0].name
        if annotations is not None:
            annotations[offset + i] = ann
        for ptype in PROMPT_TYPES:
            samples.append(make_sample(image, ann, target, ptype, rng, backend, cfg.feature_size,
                                       strategy, cfg.sigma, scene_id=offset + i))
    return samples


def make_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(),
                   backend: EmbeddingBackend | None = None,
                   strategy: MaskStrategy = MaskStrategy()
                   ) -> Tuple[List[TrainingSample], List[TrainingSample]]:
    """Train / validation splits with three prompt-type samples per scene."""
    backend = backend or SyntheticBackend()
    train = make_split(cfg, cfg.n_train, cfg.seed, backend, strategy)
    val = make_split(cfg, cfg.n_val, cfg.seed + 10_000, backend, strategy, offset=cfg.n_train)
    return train, val


def target_region(annotation: SceneAnnotation, class_name: str, feature_size: Tuple[int, int],
                  sigma: float = DEFAULT_SIGMA, threshold: float = 0.05) -> np.ndarray:
    """Boolean feature cells holding at least ``threshold`` of target density."""
    H, W = annotation.image_size
    d = render_gt_density(annotation.points[class_name], sigma, (H, W))
    return block_sum(d, H // feature_size[0]) >= threshold

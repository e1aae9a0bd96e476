"""Conversion of box, point and text prompts into prompt masks.

Every prompt type ends up as a non-negative ``(h, w)`` grid at feature
resolution. Masks are plain ``float64`` numpy arrays so they can be written
to disk and compared bit-for-bit.
"""
from __future__ import annotations

import abc
import re
from dataclasses import dataclass
from importlib import resources
from typing import Sequence, Tuple, Union

import numpy as np

Size = Tuple[int, int]  # (height, width)

DEFAULT_TAU = 100.0


class PromptError(ValueError):
    """Raised for invalid prompts or degenerate mask inputs."""


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float


@dataclass(frozen=True)
class Point:
    x: float
    y: float


@dataclass(frozen=True)
class Text:
    query: str

    def __post_init__(self):
        if not self.query or not self.query.strip():
            raise PromptError("text query must be a non-empty string")


Prompt = Union[Box, Point, Text]


@dataclass(frozen=True)
class MaskStrategy:
    """``cosine`` or ``softmax`` (with temperature ``tau``) text masks."""

    kind: str = "softmax"
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.kind not in ("cosine", "softmax"):
            raise PromptError(f"unknown mask strategy {self.kind!r}")
        if self.kind == "softmax" and not self.tau > 0:
            raise PromptError("softmax temperature must be positive")


def parse_prompt(spec: str) -> Prompt:
    """Parse ``box:x0,y0,x1,y1``, ``point:x,y`` or ``text:<query>``."""
    kind, sep, body = spec.partition(":")
    if not sep:
        raise PromptError(f"prompt must look like '<kind>:<value>', got {spec!r}")
    kind = kind.strip().lower()
    if kind == "text":
        return Text(body.strip())
    try:
        values = [float(v) for v in body.split(",")]
    except ValueError as exc:
        raise PromptError(f"bad coordinates in prompt {spec!r}") from exc
    if kind == "box" and len(values) == 4:
        return Box(*values)
    if kind == "point" and len(values) == 2:
        return Point(*values)
    raise PromptError(f"cannot parse prompt {spec!r}")


def _cell_sizes(image_size: Size, feature_size: Size) -> Tuple[float, float]:
    (H, W), (h, w) = image_size, feature_size
    if min(H, W, h, w) <= 0:
        raise PromptError("image and feature sizes must be positive")
    return H / h, W / w


def _interval_overlap(lo: float, hi: float, n: int, step: float) -> np.ndarray:
    edges = np.arange(n + 1, dtype=np.float64) * step
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def box_to_mask(box: Box, image_size: Size, feature_size: Size) -> np.ndarray:
    """Fraction of each feature cell covered by ``box``."""
    H, W = image_size
    if not (0 <= box.x0 <= W and 0 <= box.x1 <= W and 0 <= box.y0 <= H and 0 <= box.y1 <= H):
        raise PromptError("box outside image bounds")
    if box.x1 <= box.x0 or box.y1 <= box.y0:
        raise PromptError("empty box")
    sy, sx = _cell_sizes(image_size, feature_size)
    h, w = feature_size
    oy = _interval_overlap(box.y0, box.y1, h, sy) / sy
    ox = _interval_overlap(box.x0, box.x1, w, sx) / sx
    return np.outer(oy, ox)


def point_to_mask(point: Point, image_size: Size, feature_size: Size) -> np.ndarray:
    H, W = image_size
    if not (0 <= point.x <= W and 0 <= point.y <= H):
        raise PromptError("point outside image bounds")
    sy, sx = _cell_sizes(image_size, feature_size)
    h, w = feature_size
    r = min(int(point.y // sy), h - 1)
    c = min(int(point.x // sx), w - 1)
    mask = np.zeros((h, w))
    mask[r, c] = 1.0
    return mask


def resample_mask(grid: np.ndarray, size: Size) -> np.ndarray:
    """Area-weighted average of ``grid`` onto an ``size`` grid covering the same extent."""
    grid = np.asarray(grid, dtype=np.float64)
    hb, wb = grid.shape
    h, w = size
    if (hb, wb) == (h, w):
        return grid.copy()

    def weights(n_out, n_in):
        # rows: output cells, columns: input cells, entries: overlap fraction of the output cell
        step = n_in / n_out
        rows = [_interval_overlap(i * step, (i + 1) * step, n_in, 1.0) / step for i in range(n_out)]
        return np.stack(rows)

    return weights(h, hb) @ grid @ weights(w, wb).T


# ---------------------------------------------------------------------------
# Text prompts
# ---------------------------------------------------------------------------


class EmbeddingBackend(abc.ABC):
    """Frozen text / local-visual embedder shared by both text-mask strategies.

    Implementations must be deterministic and return vectors of nonzero norm.
    ``local_visual_embed`` returns the per-location projected value
    embeddings, shape ``(h, w, C_e)``. Implementations are treated as
    read-only and should be safe to share between threads.
    """

    @abc.abstractmethod
    def text_embed(self, text: str) -> np.ndarray:
        ...

    @abc.abstractmethod
    def local_visual_embed(self, image: np.ndarray) -> np.ndarray:
        ...


def _unit(v: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm <= 1e-12):
        raise PromptError("degenerate embedding")
    return v / norm


def cosine_scores(text_vec: np.ndarray, visual: np.ndarray) -> np.ndarray:
    """Raw cosine between one text vector and each location of ``visual``."""
    t = _unit(np.asarray(text_vec, dtype=np.float64))
    v = _unit(np.asarray(visual, dtype=np.float64))
    return v @ t


def text_to_mask_cosine(query: str, image: np.ndarray, backend: EmbeddingBackend,
                        feature_size: Size | None = None) -> np.ndarray:
    """Cosine text mask; negative similarities are clamped to zero."""
    scores = cosine_scores(backend.text_embed(query), backend.local_visual_embed(image))
    mask = np.clip(scores, 0.0, None)
    return mask if feature_size is None else resample_mask(mask, feature_size)


def softmax_over_concepts(scores: np.ndarray, tau: float) -> np.ndarray:
    """Per-location softmax of ``tau * scores`` over the leading (concept) axis."""
    if not tau > 0:
        raise PromptError("softmax temperature must be positive")
    logits = tau * np.asarray(scores, dtype=np.float64)
    logits = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def text_to_mask_softmax(dictionary: "ConceptDictionary", image: np.ndarray,
                         backend: EmbeddingBackend, tau: float = DEFAULT_TAU,
                         feature_size: Size | None = None) -> np.ndarray:
    if len(dictionary.concepts) == 0:
        raise PromptError("empty dictionary")
    visual = backend.local_visual_embed(image)
    scores = np.stack([cosine_scores(backend.text_embed(c), visual) for c in dictionary.concepts])
    mask = softmax_over_concepts(scores, tau)[dictionary.target_index]
    return mask if feature_size is None else resample_mask(mask, feature_size)


# ---------------------------------------------------------------------------
# Concept dictionaries
# ---------------------------------------------------------------------------

STOP_WORDS = frozenset("""
a an the and or of in on at to with without by for from into onto over under
near next beside behind above below between some many several few lots lot
this that these those there here is are was were be been being it its their
his her they them we you i he she as some any each every all no not very
photo picture image showing shows show of one two three four five six seven
eight nine ten dozen group bunch pile set number
""".split())

_WORD = re.compile(r"[a-z]+")


def _load_nouns() -> frozenset:
    text = resources.files("promptcount").joinpath("nouns.txt").read_text()
    return frozenset(w.strip() for w in text.split() if w.strip() and not w.startswith("#"))


NOUNS = _load_nouns()


def lemma(word: str) -> str:
    """Crude English singularisation, enough to match plurals to the noun list."""
    word = word.lower()
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "sses", "xes", "zes", "oes")) and len(word) > 4:
        return word[:-2]
    if word.endswith("s") and not word.endswith(("ss", "us", "is")) and len(word) > 3:
        return word[:-1]
    return word


@dataclass(frozen=True)
class ConceptDictionary:
    concepts: Tuple[str, ...]
    target_index: int

    def __post_init__(self):
        if len(self.concepts) == 0:
            raise PromptError("empty dictionary")
        if any(not c for c in self.concepts) or len(set(self.concepts)) != len(self.concepts):
            raise PromptError("concepts must be distinct non-empty strings")
        if not 0 <= self.target_index < len(self.concepts):
            raise PromptError("target index out of range")

    @property
    def target(self) -> str:
        return self.concepts[self.target_index]

    @classmethod
    def from_list(cls, concepts: Sequence[str], target: str) -> "ConceptDictionary":
        """Dictionary from explicit concepts; ``target`` is appended if missing."""
        out = []
        for c in concepts:
            c = c.strip()
            if c and c not in out:
                out.append(c)
        keys = [lemma(c) for c in out]
        if lemma(target) in keys:
            return cls(tuple(out), keys.index(lemma(target)))
        return cls(tuple(out) + (target,), len(out))


def build_concept_dictionary(caption: str, target: str) -> ConceptDictionary:
    """Extract candidate nouns from ``caption`` and locate ``target`` among them.

    Heuristic: lowercase, keep alphabetic tokens, drop stop-words, keep words
    whose singular form is in the bundled noun list, de-duplicate by singular
    form. The target is matched by singular form and appended when absent.
    """
    if not caption.strip() or not target.strip():
        raise PromptError("caption and target must be non-empty")
    target = target.strip().lower()
    words, seen = [], set()
    for tok in _WORD.findall(caption.lower()):
        key = lemma(tok)
        if tok in STOP_WORDS or key in seen:
            continue
        if key in NOUNS or tok in NOUNS or key == lemma(target):
            seen.add(key)
            words.append(tok)
    return ConceptDictionary.from_list(words, target)


def load_concept_dictionary(path, target: str) -> ConceptDictionary:
    """One concept per line; blank lines and ``#`` comments are ignored."""
    with open(path) as fh:
        concepts = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    return ConceptDictionary.from_list(concepts, target)


def prompt_to_mask(prompt: Prompt, image: np.ndarray, feature_size: Size,
                   backend: EmbeddingBackend | None = None,
                   strategy: MaskStrategy = MaskStrategy(),
                   dictionary: ConceptDictionary | None = None) -> np.ndarray:
    """Dispatch any prompt to its mask at ``feature_size``.

    ``image`` is ``(H, W, 3)``. Text prompts need a backend; the softmax
    strategy additionally needs a concept dictionary (a singleton dictionary
    holding just the query is used when none is given).
    """
    image_size = image.shape[:2]
    if isinstance(prompt, Box):
        return box_to_mask(prompt, image_size, feature_size)
    if isinstance(prompt, Point):
        return point_to_mask(prompt, image_size, feature_size)
    if backend is None:
        raise PromptError("text prompts need an embedding backend")
    if strategy.kind == "cosine":
        return text_to_mask_cosine(prompt.query, image, backend, feature_size)
    if dictionary is None:
        dictionary = ConceptDictionary((prompt.query,), 0)
    return text_to_mask_softmax(dictionary, image, backend, strategy.tau, feature_size)

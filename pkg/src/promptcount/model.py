"""Density predictor: CNN encoder, token aggregation, cross-attention decoder
and the fixed-point refinement loop.

Tensors follow the torch convention: feature maps are ``(C, h, w)`` (or
``(B, C, h, w)`` in batched code), masks and densities ``(h, w)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Tuple

import numpy as np
import torch
import torch.nn as nn

EPS = 1e-8


class CountingError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: Tuple[int, int] = (64, 64)
    feature_size: Tuple[int, int] = (8, 8)
    channels: int = 64
    heads: int = 1
    attn_dim: int = 64
    encoder_widths: Tuple[int, ...] = (16, 32)
    decoder_widths: Tuple[int, ...] = (64, 32)
    activation: str = "relu"
    output_activation: str = "relu"
    gated_values: bool = True
    iterations: int = 2

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.feature_size = tuple(self.feature_size)
        self.encoder_widths = tuple(self.encoder_widths)
        self.decoder_widths = tuple(self.decoder_widths)
        if self.iterations < 1:
            raise ValueError("iteration count must be >= 1")
        stride = 2 ** (len(self.encoder_widths) + 1)
        if tuple(f * stride for f in self.feature_size) != self.image_size:
            raise ValueError(
                f"image {self.image_size} is not feature {self.feature_size} x {stride}")
        if self.attn_dim % self.heads:
            raise ValueError("attn_dim must be divisible by heads")

    @property
    def stride(self) -> int:
        return self.image_size[0] // self.feature_size[0]


_ACTIVATIONS = {
    "relu": nn.ReLU,
    "softplus": nn.Softplus,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
}


class CountingModel(nn.Module):
    """Encoder + cross-attention similarity + convolutional density decoder.

    The token attends to every feature location; the per-head scaled
    dot-product scores form a similarity map that is concatenated with the
    features and decoded into a non-negative density.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        act = _ACTIVATIONS[config.activation]

        layers, c_in = [], 3
        for width in config.encoder_widths + (config.channels,):
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), act()]
            c_in = width
        self.encoder = nn.Sequential(*layers)

        self.to_q = nn.Linear(config.channels, config.attn_dim)
        self.to_k = nn.Conv2d(config.channels, config.attn_dim, 1)
        self.to_v = nn.Conv2d(config.channels, config.attn_dim, 1) if config.gated_values else None

        layers, c_in = [], config.channels + config.heads + (config.attn_dim if config.gated_values else 0)
        for width in config.decoder_widths:
            layers += [nn.Conv2d(c_in, width, 3, padding=1), act()]
            c_in = width
        layers.append(nn.Conv2d(c_in, 1, 1))
        self.decoder = nn.Sequential(*layers)
        self.out_act = _ACTIVATIONS[config.output_activation]()
        with torch.no_grad():
            self.decoder[-1].bias.fill_(0.01)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != self.config.image_size:
            raise CountingError(
                f"image size {tuple(images.shape[-2:])} != configured {self.config.image_size}")
        return self.encoder(images)

    def similarity(self, feats: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
        B, _, h, w = feats.shape
        H = self.config.heads
        q = self.to_q(token).view(B, H, -1, 1, 1)
        k = self.to_k(feats).view(B, H, -1, h, w)
        return (q * k).sum(2) / math.sqrt(q.shape[2])

    def decode(self, feats: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
        sim = self.similarity(feats, token)
        parts = [feats, sim]
        if self.to_v is not None:
            B, _, h, w = feats.shape
            v = self.to_v(feats).view(B, self.config.heads, -1, h, w)
            parts.append((v * torch.sigmoid(sim).unsqueeze(2)).view(B, -1, h, w))
        x = torch.cat(parts, dim=1)
        return self.out_act(self.decoder(x)).squeeze(1)

    def step(self, density: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
        return self.decode(feats, aggregate(feats, density))


def aggregate(feats: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched mask-weighted mean: ``(B, C, h, w), (B, h, w) -> (B, C)``.

    Samples whose mask mass is below EPS get a zero token; callers that need
    the error semantics use :func:`aggregate_token`.
    """
    mass = mask.sum((-2, -1))
    num = torch.einsum("bchw,bhw->bc", feats, mask)
    return num / mass.clamp_min(EPS).unsqueeze(-1)


# ---------------------------------------------------------------------------
# Single-sample operations
# ---------------------------------------------------------------------------


def image_to_tensor(image) -> torch.Tensor:
    """``(H, W, 3)`` uint8 array -> ``(3, H, W)`` float tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image
    arr = np.asarray(image)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return t.float() / 255.0 if arr.dtype == np.uint8 else t.float()


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    if like is not None:
        t = t.to(like.dtype)
    return t


def encode_image(image, model: CountingModel) -> torch.Tensor:
    x = image_to_tensor(image).to(next(model.parameters()).dtype)
    if x.ndim != 3 or x.shape[0] != 3:
        raise CountingError(f"expected an (H, W, 3) image, got shape {tuple(x.shape)}")
    return model.encode(x.unsqueeze(0))[0]


def aggregate_token(feats, mask) -> torch.Tensor:
    """Token = sum_i m_i F_i / sum_i m_i for ``feats`` (C, h, w), ``mask`` (h, w)."""
    feats = _as_tensor(feats)
    mask = _as_tensor(mask, like=feats)
    if mask.shape != feats.shape[1:]:
        raise CountingError(f"mask shape {tuple(mask.shape)} != feature grid {tuple(feats.shape[1:])}")
    if torch.any(mask < 0):
        raise CountingError("mask must be non-negative")
    if float(mask.sum()) <= EPS:
        raise CountingError("empty mask")
    return aggregate(feats.unsqueeze(0), mask.unsqueeze(0))[0]


def predict_density(feats, token, model: CountingModel) -> torch.Tensor:
    feats = _as_tensor(feats)
    return model.decode(feats.unsqueeze(0), _as_tensor(token, like=feats).unsqueeze(0))[0]


def fixed_point_step(density, feats, model: CountingModel) -> torch.Tensor:
    """One application of the fixed-point map: re-prompt with ``density``."""
    feats = _as_tensor(feats)
    density = _as_tensor(density, like=feats)
    if float(density.sum()) <= EPS:
        raise CountingError("vanished density")
    return predict_density(feats, aggregate_token(feats, density), model)


@dataclass
class RefineResult:
    iterates: List[torch.Tensor] = field(default_factory=list)
    truncated: bool = False

    @property
    def final(self) -> torch.Tensor:
        return self.iterates[-1]


def iterate_fixed_point(step: Callable, d0, T: int) -> RefineResult:
    """Apply ``step`` T times from ``d0``; stops early on a vanished density."""
    if T < 1:
        raise CountingError("T must be >= 1")
    out, d = RefineResult(), d0
    for _ in range(T):
        try:
            d = step(d)
        except CountingError as exc:
            if "vanished" not in str(exc):
                raise
            out.truncated = True
            break
        out.iterates.append(d)
    return out


def refine(mask, feats, model: CountingModel, T: int) -> RefineResult:
    """Iterates d(1)..d(T) starting from the prompt mask."""
    feats = _as_tensor(feats)
    mask = _as_tensor(mask, like=feats)
    if float(mask.sum()) <= EPS:
        raise CountingError("empty mask")
    return iterate_fixed_point(lambda d: fixed_point_step(d, feats, model), mask, T)


def refine_batch(model: CountingModel, feats: torch.Tensor, masks: torch.Tensor, T: int
                 ) -> List[torch.Tensor]:
    """Batched iterates d(1)..d(T). A sample whose density vanishes keeps that
    (empty) density for the remaining iterations, as :func:`refine` would."""
    out, d = [], masks
    alive = masks.sum((-2, -1)) > EPS
    for _ in range(T):
        nxt = model.step(d, feats)
        d = torch.where(alive[:, None, None], nxt, d)
        alive = alive & (d.sum((-2, -1)) > EPS)
        out.append(d)
    return out


def count(density) -> float:
    return float(_as_tensor(density).sum())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PCKPT1\n"


def save_checkpoint(model: CountingModel, path) -> None:
    """Flat container: magic line, one JSON header line, raw little-endian arrays.

    The header holds ``config`` (the ModelConfig fields) and ``arrays``: a list
    of ``{name, shape, dtype, offset, nbytes}`` with offsets into the payload
    that follows the header.
    """
    arrays, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = arr.astype(dtype).tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                       "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(model.config), "arrays": arrays}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header.encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> CountingModel:
    with open(path, "rb") as fh:
        if fh.readline() != CKPT_MAGIC:
            raise CountingError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        payload = fh.read()
    model = CountingModel(ModelConfig(**header["config"]))
    state = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    if any(e["dtype"] == "<f8" for e in header["arrays"]):
        model.double()
    model.load_state_dict(state)
    return model

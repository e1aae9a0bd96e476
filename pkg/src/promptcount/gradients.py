"""Numerical checks of the last-iteration gradient approximation.

Compares, on a small double-precision model, the gradient obtained by
differentiating only the final refinement step against the fully unrolled
gradient and against truncated Neumann-series corrections of the implicit
gradient; both autodiff routes are also checked by central differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

from .losses import l2_loss
from .model import CountingModel, ModelConfig, image_to_tensor


class GradientError(RuntimeError):
    pass


def tiny_config(**overrides) -> ModelConfig:
    """A < 10^4 parameter configuration with smooth activations (no ReLU kinks
    for the finite-difference check)."""
    base = dict(image_size=(32, 32), feature_size=(4, 4), channels=8, heads=1, attn_dim=8,
                encoder_widths=(4, 8), decoder_widths=(8, 8), activation="tanh",
                output_activation="softplus", iterations=2)
    base.update(overrides)
    return ModelConfig(**base)


def flat(grads: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([g.reshape(-1) for g in grads])


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(a @ b / (a.norm() * b.norm()))


def rel_diff(a: torch.Tensor, ref: torch.Tensor) -> float:
    return float((a - ref).norm() / ref.norm())


def neumann_gradient(step: Callable[[torch.Tensor], torch.Tensor], z: torch.Tensor,
                     params: Sequence[torch.Tensor], loss_fn: Callable[[torch.Tensor], torch.Tensor],
                     K: int) -> List[torch.Tensor]:
    """``dL/dy * sum_{k<=K} J^k * dF/dparams`` with ``y = step(z)``, ``J = dF/dz``.

    ``z`` is treated as the fixed point; K = 0 is the last-step gradient.
    """
    z = z.detach().requires_grad_(True)
    y = step(z)
    (v,) = torch.autograd.grad(loss_fn(y), y, retain_graph=True)
    u, acc = v, v
    for _ in range(K):
        (u,) = torch.autograd.grad(y, z, grad_outputs=u, retain_graph=True)
        acc = acc + u
    return list(torch.autograd.grad(y, params, grad_outputs=acc, allow_unused=True))


# ---------------------------------------------------------------------------
# Counting-model check
# ---------------------------------------------------------------------------


def _prepare(model, image, mask, target):
    dtype = next(model.parameters()).dtype
    x = image_to_tensor(image).to(dtype).unsqueeze(0)
    m = torch.as_tensor(np.asarray(mask)).to(dtype).unsqueeze(0)
    y = torch.as_tensor(np.asarray(target)).to(dtype).unsqueeze(0)
    return x, m, y


def unrolled_loss(model: CountingModel, x, m, y, T: int) -> torch.Tensor:
    feats = model.encode(x)
    d = m
    for _ in range(T):
        d = model.step(d, feats)
    return l2_loss(d, y)


def penultimate(model: CountingModel, x, m, T: int) -> torch.Tensor:
    with torch.no_grad():
        feats = model.encode(x)
        d = m
        for _ in range(T - 1):
            d = model.step(d, feats)
    return d


def last_step_loss(model: CountingModel, x, z, y) -> torch.Tensor:
    """Loss of one step from a fixed (detached) previous iterate ``z``."""
    return l2_loss(model.step(z, model.encode(x)), y)


def central_difference(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                       h: float = 1e-5) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for p in params:
            flat_p = p.view(-1)
            g = torch.empty_like(flat_p)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + h
                fp = fn().item()
                flat_p[i] = orig - h
                fm = fn().item()
                flat_p[i] = orig
                g[i] = (fp - fm) / (2 * h)
            out.append(g)
    return torch.cat(out)


@dataclass
class GradientReport:
    T: int
    n_params: int
    first_order: torch.Tensor
    unrolled: torch.Tensor
    neumann: Dict[int, torch.Tensor] = field(default_factory=dict)
    cosine: Dict[str, float] = field(default_factory=dict)
    rel_diff: Dict[str, float] = field(default_factory=dict)
    fd_rel_error: Dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"T={self.T} params={self.n_params}"]
        lines += [f"cos[{k}]={v:.6f}" for k, v in self.cosine.items()]
        lines += [f"rel[{k}]={v:.3e}" for k, v in self.rel_diff.items()]
        lines += [f"fd[{k}]={v:.3e}" for k, v in self.fd_rel_error.items()]
        return "\n".join(lines)


def implicit_gradient_check(model: CountingModel, sample, T: int = 2,
                            neumann_terms: Sequence[int] = (0, 1, 2, 4, 8),
                            finite_differences: bool = True, h: float = 1e-5) -> GradientReport:
    """Compare last-step, unrolled and truncated-Neumann gradients on one sample.

    ``sample`` needs ``image``, ``mask`` and ``density`` attributes. Gradients
    are taken w.r.t. every model parameter (encoder included, since the
    features depend on it).
    """
    params = [p for p in model.parameters()]
    n = sum(p.numel() for p in params)
    if n > 10_000:
        raise GradientError(f"model too large for a full check ({n} parameters)")
    x, m, y = _prepare(model, sample.image, sample.mask, sample.density)

    z = penultimate(model, x, m, T)
    g_first = flat(torch.autograd.grad(last_step_loss(model, x, z, y), params))
    g_unrolled = flat(torch.autograd.grad(unrolled_loss(model, x, m, y, T), params))
    for g in (g_first, g_unrolled):
        if not torch.isfinite(g).all():
            raise GradientError("non-finite gradient")

    report = GradientReport(T, n, g_first, g_unrolled)

    def step_with_features(d):
        return model.step(d, model.encode(x))

    for K in neumann_terms:
        gk = neumann_gradient(step_with_features, z, params, lambda d: l2_loss(d, y), K)
        report.neumann[K] = flat([torch.zeros_like(p) if g is None else g
                                  for g, p in zip(gk, params)])

    report.cosine["first_vs_unrolled"] = cosine(g_first, g_unrolled)
    report.rel_diff["first_vs_unrolled"] = rel_diff(g_first, g_unrolled)
    for K, gk in report.neumann.items():
        report.cosine[f"neumann{K}_vs_unrolled"] = cosine(gk, g_unrolled)
        report.rel_diff[f"neumann{K}_vs_first"] = rel_diff(gk, g_first)

    if finite_differences:
        fd_first = central_difference(lambda: last_step_loss(model, x, z, y), params, h)
        fd_unrolled = central_difference(lambda: unrolled_loss(model, x, m, y, T), params, h)
        report.fd_rel_error["first_order"] = rel_diff(g_first, fd_first)
        report.fd_rel_error["unrolled"] = rel_diff(g_unrolled, fd_unrolled)
    return report


# ---------------------------------------------------------------------------
# Toy operators with closed-form implicit gradients
# ---------------------------------------------------------------------------


def sigmoid_fixed_point(theta: torch.Tensor, d0: float = 0.5, tol: float = 1e-14,
                        max_iter: int = 10_000) -> torch.Tensor:
    """Solve ``d = sigmoid(theta * d)`` elementwise by plain iteration."""
    with torch.no_grad():
        d = torch.full_like(theta, d0)
        for _ in range(max_iter):
            nxt = torch.sigmoid(theta * d)
            if (nxt - d).abs().max() < tol:
                return nxt
            d = nxt
    raise GradientError("toy iteration did not converge")


def sigmoid_first_order_gradient(theta: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Last-step gradient of ``||sigmoid(theta * d*) - target||^2`` w.r.t. theta."""
    d_star = sigmoid_fixed_point(theta)
    th = theta.detach().clone().requires_grad_(True)
    loss = ((torch.sigmoid(th * d_star) - target) ** 2).sum()
    (g,) = torch.autograd.grad(loss, th)
    return g

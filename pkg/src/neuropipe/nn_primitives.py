"""Differentiable operators and losses used by the three pipelines.

Each operator comes twice: a plain-loop float64 reference (``*_reference``)
that serves as the oracle, and a vectorized torch path used inside models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import BoundingBox
from .errors import (
    BadLabel,
    NegativeWeight,
    RoiOutOfBounds,
    RoiTooSmall,
    ShapeMismatch,
    WindowTooLarge,
)

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class PoolSpec:
    window: tuple[int, int]
    stride: tuple[int, int]

    def __post_init__(self):
        w = _pair(self.window)
        s = _pair(self.stride)
        if min(w) < 1 or min(s) < 1:
            raise ValueError(f"window and stride must be positive, got {w}, {s}")
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "stride", s)

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.window
        if kh > h or kw > w:
            raise WindowTooLarge(f"window {self.window} does not fit a {h}x{w} map")
        sh, sw = self.stride
        return (h - kh) // sh + 1, (w - kw) // sw + 1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


def _as_tensor(x: ArrayLike) -> tuple[torch.Tensor, bool]:
    if torch.is_tensor(x):
        return x, False
    return torch.from_numpy(np.asarray(x, dtype=np.float64)), True


# ---------------------------------------------------------------------------
# L2-norm pooling


def l2pool_forward_reference(x: np.ndarray, spec: PoolSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    oh, ow = spec.output_shape(h, w)
    (kh, kw), (sh, sw) = spec.window, spec.stride
    y = np.zeros((c, oh, ow))
    for k in range(c):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for di in range(kh):
                    for dj in range(kw):
                        v = x[k, i * sh + di, j * sw + dj]
                        acc += v * v
                y[k, i, j] = math.sqrt(acc)
    return y


def l2pool_backward_reference(x: np.ndarray, spec: PoolSpec, grad_out: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    y = l2pool_forward_reference(x, spec)
    if np.shape(grad_out) != y.shape:
        raise ShapeMismatch(f"grad_out shape {np.shape(grad_out)} != output shape {y.shape}")
    (kh, kw), (sh, sw) = spec.window, spec.stride
    g_in = np.zeros_like(x)
    for k in range(c):
        for i in range(y.shape[1]):
            for j in range(y.shape[2]):
                if y[k, i, j] == 0.0:
                    continue
                ratio = grad_out[k, i, j] / y[k, i, j]
                for di in range(kh):
                    for dj in range(kw):
                        g_in[k, i * sh + di, j * sw + dj] += ratio * x[k, i * sh + di, j * sw + dj]
    return g_in


def _window_sums(sq: torch.Tensor, spec: PoolSpec) -> torch.Tensor:
    n, c, h, w = sq.shape
    oh, ow = spec.output_shape(h, w)
    cols = F.unfold(sq.reshape(n * c, 1, h, w), spec.window, stride=spec.stride)
    return cols.sum(dim=1).reshape(n, c, oh, ow)


def _spread(per_window: torch.Tensor, spec: PoolSpec, h: int, w: int) -> torch.Tensor:
    # adjoint of _window_sums: add each window's value onto all of its cells
    n, c, oh, ow = per_window.shape
    kh, kw = spec.window
    cols = per_window.reshape(n * c, 1, oh * ow).expand(n * c, kh * kw, oh * ow)
    out = F.fold(cols.contiguous(), (h, w), spec.window, stride=spec.stride)
    return out.reshape(n, c, h, w)


class L2Pool2dFunction(torch.autograd.Function):
    """``y = sqrt(sum_window x^2)`` with the zero-norm subgradient set to 0."""

    @staticmethod
    def forward(ctx, x, kh, kw, sh, sw):
        spec = PoolSpec((kh, kw), (sh, sw))
        y = torch.sqrt(_window_sums(x * x, spec))
        ctx.spec = spec
        ctx.save_for_backward(x, y)
        return y

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_y):
        x, y = ctx.saved_tensors
        safe = torch.where(y > 0, y, torch.ones_like(y))
        ratio = torch.where(y > 0, grad_y / safe, torch.zeros_like(y))
        grad_x = x * _spread(ratio, ctx.spec, x.shape[-2], x.shape[-1])
        return grad_x, None, None, None, None


def l2pool2d(x: torch.Tensor, window=2, stride=None) -> torch.Tensor:
    """L2-norm pooling over ``(N, C, H, W)`` or ``(C, H, W)`` tensors."""
    spec = PoolSpec(window, stride if stride is not None else window)
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    spec.output_shape(x.shape[-2], x.shape[-1])
    y = L2Pool2dFunction.apply(x, *spec.window, *spec.stride)
    return y.squeeze(0) if squeeze else y


class L2Pool2d(nn.Module):
    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = _pair(window)
        self.stride = _pair(stride if stride is not None else window)

    def forward(self, x):
        return l2pool2d(x, self.window, self.stride)

    def extra_repr(self):
        return f"window={self.window}, stride={self.stride}"


def l2pool_forward(x: ArrayLike, spec: PoolSpec) -> ArrayLike:
    t, was_np = _as_tensor(x)
    with torch.no_grad():
        y = l2pool2d(t, spec.window, spec.stride)
    return y.numpy() if was_np else y


def l2pool_backward(x: ArrayLike, spec: PoolSpec, grad_out: ArrayLike) -> ArrayLike:
    t, was_np = _as_tensor(x)
    g, _ = _as_tensor(grad_out)
    squeeze = t.dim() == 3
    t4 = t.unsqueeze(0) if squeeze else t
    g4 = g.unsqueeze(0) if squeeze else g
    oh, ow = spec.output_shape(t4.shape[-2], t4.shape[-1])
    if tuple(g4.shape) != (t4.shape[0], t4.shape[1], oh, ow):
        raise ShapeMismatch(f"grad_out shape {tuple(g.shape)} does not match pooled output")
    leaf = t4.detach().clone().requires_grad_(True)
    y = L2Pool2dFunction.apply(leaf, *spec.window, *spec.stride)
    (grad,) = torch.autograd.grad(y, leaf, g4.to(leaf.dtype))
    grad = grad.squeeze(0) if squeeze else grad
    return grad.numpy() if was_np else grad


# ---------------------------------------------------------------------------
# ROI pooling on a single pyramid level


@dataclass(frozen=True)
class Roi:
    box: BoundingBox
    output_size: tuple[int, int]

    def __post_init__(self):
        ph, pw = _pair(self.output_size)
        if ph < 1 or pw < 1:
            raise ValueError(f"output size must be positive, got {(ph, pw)}")
        object.__setattr__(self, "output_size", (ph, pw))


def _snap(v: float) -> int:
    return int(math.floor(v + 0.5))


def roi_cells(box: BoundingBox, height: int, width: int) -> tuple[int, int, int, int]:
    """Snap a feature-map box to integer cells ``(r0, c0, r1, c1)``, upper exclusive."""
    c0, r0, c1, r1 = _snap(box.x_min), _snap(box.y_min), _snap(box.x_max), _snap(box.y_max)
    if c0 < 0 or r0 < 0 or c1 > width or r1 > height:
        raise RoiOutOfBounds(f"ROI cells rows {r0}:{r1}, cols {c0}:{c1} exceed a {height}x{width} map")
    if r1 <= r0 or c1 <= c0:
        raise RoiTooSmall(f"ROI {box} covers no whole cell")
    return r0, c0, r1, c1


def bin_edges(length: int, bins: int) -> list[int]:
    return [(b * length) // bins for b in range(bins + 1)]


def roi_spp_pool_reference(x: np.ndarray, roi: Roi) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    r0, c0, r1, c1 = roi_cells(roi.box, h, w)
    ph, pw = roi.output_size
    if r1 - r0 < ph or c1 - c0 < pw:
        raise RoiTooSmall(f"ROI spans {(r1 - r0, c1 - c0)} cells, needs at least {(ph, pw)}")
    re, ce = bin_edges(r1 - r0, ph), bin_edges(c1 - c0, pw)
    out = np.empty((c, ph, pw))
    for k in range(c):
        for i in range(ph):
            for j in range(pw):
                best = -math.inf
                for r in range(r0 + re[i], r0 + re[i + 1]):
                    for q in range(c0 + ce[j], c0 + ce[j + 1]):
                        best = max(best, x[k, r, q])
                out[k, i, j] = best
    return out


def roi_pool_cells(x: torch.Tensor, cells: tuple[int, int, int, int], output_size: tuple[int, int]) -> torch.Tensor:
    """Max-pool integer cell ROI ``(r0, c0, r1, c1)`` of a ``(C, H, W)`` tensor
    into ``(C, ph, pw)`` floor-partitioned bins."""
    r0, c0, r1, c1 = cells
    ph, pw = output_size
    crop = x[:, r0:r1, c0:c1]
    re, ce = bin_edges(r1 - r0, ph), bin_edges(c1 - c0, pw)
    rows = torch.stack([crop[:, re[i] : re[i + 1], :].amax(dim=1) for i in range(ph)], dim=1)
    return torch.stack([rows[:, :, ce[j] : ce[j + 1]].amax(dim=2) for j in range(pw)], dim=2)


def roi_spp_pool(x: ArrayLike, roi: Roi) -> ArrayLike:
    t, was_np = _as_tensor(x)
    r0, c0, r1, c1 = roi_cells(roi.box, t.shape[-2], t.shape[-1])
    ph, pw = roi.output_size
    if r1 - r0 < ph or c1 - c0 < pw:
        raise RoiTooSmall(f"ROI spans {(r1 - r0, c1 - c0)} cells, needs at least {(ph, pw)}")
    y = roi_pool_cells(t, (r0, c0, r1, c1), (ph, pw))
    return y.numpy() if was_np else y


# ---------------------------------------------------------------------------
# Losses. The numpy versions return (loss, gradient) and act as references
# for the batched torch versions used in training.


def _check_label(label: int, k: int) -> int:
    if not (isinstance(label, (int, np.integer)) and 0 <= label < k):
        raise BadLabel(f"label {label!r} outside [0, {k})")
    return int(label)


def multiclass_hinge_loss(scores, label: int, margin: float = 1.0) -> tuple[float, np.ndarray]:
    """``sum_{j != y} max(0, margin + s_j - s_y)``; a term exactly at its hinge
    contributes no gradient."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_label(label, len(s))
    if not margin > 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    loss = 0.0
    grad = np.zeros_like(s)
    for j in range(len(s)):
        if j == y:
            continue
        m = margin + s[j] - s[y]
        if m > 0:
            loss += m
            grad[j] += 1.0
            grad[y] -= 1.0
    return loss, grad


def hinge_loss_torch(scores: torch.Tensor, labels: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Batch mean of the multiclass hinge loss for ``(N, K)`` scores."""
    true = scores.gather(1, labels[:, None])
    terms = F.relu(margin + scores - true)
    terms = terms.masked_fill(F.one_hot(labels, scores.shape[1]).bool(), 0.0)
    return terms.sum(dim=1).mean()


def smooth_l1(pred, target) -> tuple[float, np.ndarray]:
    u = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(u)
    loss = float(np.where(a < 1.0, 0.5 * u * u, a - 0.5).sum())
    grad = np.where(a < 1.0, u, np.sign(u))
    return loss, grad


def smooth_l1_torch(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row sum over the coordinates (shape ``pred.shape[:-1]``)."""
    u = pred - target
    a = u.abs()
    return torch.where(a < 1.0, 0.5 * u * u, a - 0.5).sum(dim=-1)


def softmax_ce(scores, label: int) -> tuple[float, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = _check_label(label, len(s))
    shift = s - s.max()
    lse = math.log(np.exp(shift).sum())
    p = np.exp(shift - lse)
    grad = p.copy()
    grad[y] -= 1.0
    return float(lse - shift[y]), grad


def multitask_loss(cls, reg, mask=None, weights: Sequence[float] = (1.0, 1.0, 1.0)):
    """Weighted sum ``w1*cls + w2*reg + w3*mask``; works on floats or tensors."""
    w = [float(v) for v in weights]
    if len(w) != 3:
        raise ValueError(f"expected 3 weights, got {len(w)}")
    if any(v < 0 for v in w):
        raise NegativeWeight(f"loss weights must be >= 0, got {w}")
    total = w[0] * cls + w[1] * reg
    if mask is not None:
        total = total + w[2] * mask
    return total


# ---------------------------------------------------------------------------
# Finite differences


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64, not modified)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|)``: worst error relative to the
    gradient's scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def parameter_gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    param: torch.Tensor,
    indices: Optional[Sequence[tuple]] = None,
    eps: float = 1e-3,
    kink_tol: Optional[float] = None,
    detail: bool = False,
):
    """Compare autograd and central differences for selected entries of
    ``param`` under a scalar ``loss_fn``; returns the max relative error.

    ReLU and max pooling make networks piecewise smooth.  With ``kink_tol``
    set, an entry is left out when a switch point lies within ``eps`` of it:
    either its forward and backward one-sided slopes differ, or the central
    difference at ``eps / 2`` disagrees with the one at ``eps``, by more than
    ``kink_tol`` times the gradient scale.  The second test catches switches
    crossed on both sides.  ``detail=True`` returns a :class:`GradCheckResult`.
    """
    if param.grad is not None:
        param.grad = None
    loss = loss_fn()
    f0 = loss.item()
    (grad,) = torch.autograd.grad(loss, param)
    if indices is None:
        indices = list(np.ndindex(*param.shape))
    analytic, numeric, jumps = [], [], []
    with torch.no_grad():
        for idx in indices:
            orig = param[idx].item()
            param[idx] = orig + eps
            fp = loss_fn().item()
            param[idx] = orig - eps
            fm = loss_fn().item()
            jump = abs((fp - f0) - (f0 - fm)) / eps
            if kink_tol is not None:
                param[idx] = orig + eps / 2
                fp2 = loss_fn().item()
                param[idx] = orig - eps / 2
                fm2 = loss_fn().item()
                jump = max(jump, abs((fp - fm) / (2 * eps) - (fp2 - fm2) / eps))
            param[idx] = orig
            numeric.append((fp - fm) / (2 * eps))
            jumps.append(jump)
            analytic.append(grad[idx].item())
    a, n, j = np.asarray(analytic), np.asarray(numeric), np.asarray(jumps)
    keep = np.ones(len(a), dtype=bool)
    # one scale for the screen and the error: the gradient over all requested entries
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    if kink_tol is not None:
        keep = j <= kink_tol * scale
    err = float(np.abs(a[keep] - n[keep]).max(initial=0.0) / scale)
    if detail:
        return GradCheckResult(err, int(keep.sum()), int((~keep).sum()))
    return err

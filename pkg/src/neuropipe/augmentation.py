"""Seeded slice augmentation: flips, mean-anchored contrast change, rescaling.

Every random draw comes from a generator keyed by ``(seed, draw_index)``, so
a draw can be reproduced in isolation from any data-loading worker.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateOutput, NonPositiveFactor
from .imaging_io import SliceStack, resize_bilinear

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class AugmentPolicy:
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.8, 1.2)
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_h_prob", "flip_v_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("contrast_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lower <= upper, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), (1.0, 1.0), seed)


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool
    flip_v: bool
    contrast: float
    scale: float


def draw_generator(seed: int, draw_index: int) -> np.random.Generator:
    """Counter-style generator: a fresh Philox stream per ``(seed, draw_index)``."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, draw_index & 0xFFFFFFFFFFFFFFFF])
    return np.random.Generator(np.random.Philox(ss))


def draw_params(policy: AugmentPolicy, draw_index: int) -> AugmentDraw:
    u = draw_generator(policy.seed, draw_index).random(4)
    c_lo, c_hi = policy.contrast_range
    s_lo, s_hi = policy.scale_range
    return AugmentDraw(
        flip_h=bool(u[0] < policy.flip_h_prob),
        flip_v=bool(u[1] < policy.flip_v_prob),
        contrast=c_lo + (c_hi - c_lo) * float(u[2]),
        scale=s_lo + (s_hi - s_lo) * float(u[3]),
    )


def _flip_array(a: np.ndarray, axis: str) -> np.ndarray:
    if axis == HORIZONTAL:
        return a[:, ::-1].copy()
    if axis == VERTICAL:
        return a[::-1, :].copy()
    raise ValueError(f"flip axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def flip(stack: SliceStack, axis: str) -> SliceStack:
    return stack.with_pixels(_flip_array(stack.pixels, axis))


def adjust_contrast(stack: SliceStack, factor: float) -> SliceStack:
    """``mean + factor * (x - mean)`` per channel; clipped to [0, 1] for
    normalized stacks."""
    if not factor > 0:
        raise NonPositiveFactor(f"contrast factor must be > 0, got {factor}")
    x = stack.pixels.astype(np.float64)
    mean = x.mean(axis=(0, 1), keepdims=True)
    out = mean + factor * (x - mean)
    if stack.normalized:
        out = np.clip(out, 0.0, 1.0)
    return stack.with_pixels(out)


def scaled_size(h: int, w: int, factor: float) -> tuple[int, int]:
    # round half up, not to even
    return int(np.floor(h * factor + 0.5)), int(np.floor(w * factor + 0.5))


def _rescale_array(a: np.ndarray, factor: float) -> np.ndarray:
    if not factor > 0:
        raise NonPositiveFactor(f"scale factor must be > 0, got {factor}")
    oh, ow = scaled_size(a.shape[0], a.shape[1], factor)
    if oh < 1 or ow < 1:
        raise DegenerateOutput(f"rescaling {a.shape[:2]} by {factor} gives {(oh, ow)}")
    return resize_bilinear(a, oh, ow)


def rescale(stack: SliceStack, factor: float) -> SliceStack:
    return stack.with_pixels(_rescale_array(stack.pixels, factor))


def _apply(stack: SliceStack, d: AugmentDraw) -> SliceStack:
    out = stack
    if d.flip_h:
        out = flip(out, HORIZONTAL)
    if d.flip_v:
        out = flip(out, VERTICAL)
    if d.contrast != 1.0:
        out = adjust_contrast(out, d.contrast)
    if d.scale != 1.0:
        out = rescale(out, d.scale)
    return out


def apply_policy(stack: SliceStack, policy: AugmentPolicy, draw_index: int) -> SliceStack:
    """Flip-h, flip-v, contrast, scale, in that order, with draws keyed by
    ``(policy.seed, draw_index)``."""
    return _apply(stack, draw_params(policy, draw_index))


def apply_policy_with_mask(
    stack: SliceStack, mask: np.ndarray, policy: AugmentPolicy, draw_index: int
) -> tuple[SliceStack, np.ndarray]:
    """Same draw for an image and its label mask.

    Geometric transforms reach the mask too (resampled, then re-binarized at
    0.5); the contrast change touches the image only.
    """
    d = draw_params(policy, draw_index)
    image = _apply(stack, d)
    m = np.asarray(mask).astype(np.float64)
    if d.flip_h:
        m = _flip_array(m, HORIZONTAL)
    if d.flip_v:
        m = _flip_array(m, VERTICAL)
    if d.scale != 1.0:
        m = _rescale_array(m, d.scale) > 0.5
    return image, m.astype(bool)


def transform_boxes(
    boxes: np.ndarray, draw: AugmentDraw, height: int, width: int, out_size: Optional[tuple[int, int]] = None
) -> np.ndarray:
    """Map ``(N, 4)`` pixel boxes through the geometric part of a draw."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if draw.flip_h:
        b[:, [0, 2]] = width - b[:, [2, 0]]
    if draw.flip_v:
        b[:, [1, 3]] = height - b[:, [3, 1]]
    if draw.scale != 1.0:
        oh, ow = out_size or scaled_size(height, width, draw.scale)
        b[:, [0, 2]] *= ow / width
        b[:, [1, 3]] *= oh / height
    return b

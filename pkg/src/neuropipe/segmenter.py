"""Four-stage instance segmentation cascade.

1. anchor objectness and anchor-relative box deltas on stride-4 features;
2. box refinement of the surviving proposals;
3. an ``m x m`` mask per refined box from full-resolution features;
4. instance classification from mask-gated features (background plus the
   four tumour compartments).

Boxes passed from one stage to the next are treated as constants, so the
gradient of the joint loss reaches every stage through the shared backbone
and the stage heads, but not through the discrete box selection.  Training
first fixes all discrete choices (anchor sampling, proposals, refined boxes,
targets) in a :class:`TrainPlan`; the loss given a plan is a smooth function
of the weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import BoundingBox, box_from_mask, box_iou, boxes_to_mask, clip_boxes, decode_deltas, encode_deltas, nms, valid_boxes
from .errors import BadConfig, EmptyDataset, WrongChannels
from .imaging_io import SliceStack
from .labels import SUBREGIONS
from .metrics import dice
from .nn_primitives import multitask_loss, smooth_l1_torch
from .training import (
    TrainConfig,
    TrainHistory,
    batch_indices,
    check_finite,
    close_history,
    make_optimizer,
    make_scheduler,
    open_history,
    seeded,
)

DEFAULT_SCALES = (8.0, 16.0, 32.0)
DEFAULT_ASPECTS = (0.5, 1.0, 2.0)
# stage-2 deltas are learned in units of these spreads
REFINE_STD = (0.1, 0.1, 0.2, 0.2)


@dataclass
class SegmenterConfig:
    in_channels: int = 4
    num_subregions: int = len(SUBREGIONS)
    backbone_channels: tuple[int, int, int] = (16, 32, 32)
    anchor_shapes: Optional[tuple[tuple[float, float], ...]] = None
    anchor_k: int = 9
    rpn_batch: int = 64
    pre_nms_top: int = 100
    rpn_nms: float = 0.7
    post_nms_top: int = 10
    objectness_threshold: float = 0.5
    align_size: int = 7
    refine_width: int = 64
    mask_size: int = 14
    mask_channels: int = 16
    mask_expand: float = 1.25
    cls_width: int = 32
    jitter_per_truth: int = 4
    score_threshold: float = 0.5
    instance_nms: float = 0.5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.backbone_channels) != 3 or min(self.backbone_channels) < 1:
            raise BadConfig(f"need 3 positive backbone widths, got {self.backbone_channels}")
        if self.anchor_shapes is not None:
            self.anchor_shapes = tuple((float(w), float(h)) for w, h in self.anchor_shapes)
            if not self.anchor_shapes or min(min(s) for s in self.anchor_shapes) <= 0:
                raise BadConfig("anchor shapes must be positive (w, h) pairs")
        if self.anchor_k < 1 or self.mask_size < 2 or self.align_size < 1:
            raise BadConfig("anchor_k, mask_size and align_size must be positive")
        if self.mask_expand < 1.0:
            raise BadConfig(f"mask_expand must be >= 1, got {self.mask_expand}")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise BadConfig(f"loss weights must be three values >= 0, got {self.loss_weights}")

    @property
    def stride(self) -> int:
        return 4

    @property
    def shapes(self) -> tuple[tuple[float, float], ...]:
        if self.anchor_shapes is not None:
            return self.anchor_shapes
        return default_anchor_shapes()


# ---------------------------------------------------------------------------
# Anchors


def default_anchor_shapes(scales=DEFAULT_SCALES, aspects=DEFAULT_ASPECTS) -> tuple[tuple[float, float], ...]:
    """Square-root aspect split: ``w = s / sqrt(a)``, ``h = s * sqrt(a)``."""
    return tuple((s / math.sqrt(a), s * math.sqrt(a)) for s in scales for a in aspects)


def kmeans_box_shapes(sizes: np.ndarray, k: int, iterations: int = 100) -> np.ndarray:
    """Lloyd's k-means on ``(N, 2)`` box (w, h) pairs.

    Initial centroids are evenly spaced quantiles of the boxes sorted by
    area, so the result is deterministic.  Empty clusters keep their
    previous centroid.  Returns ``(k, 2)`` sorted by area.
    """
    x = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise ValueError("k-means needs at least one box")
    order = np.argsort(x[:, 0] * x[:, 1], kind="stable")
    picks = np.round(np.linspace(0, len(x) - 1, k)).astype(int)
    cent = x[order[picks]].copy()
    for _ in range(iterations):
        d = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        new = cent.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        if np.allclose(new, cent, rtol=0, atol=1e-12):
            cent = new
            break
        cent = new
    return cent[np.argsort(cent[:, 0] * cent[:, 1], kind="stable")]


def anchor_shapes_from_boxes(boxes: np.ndarray, k: int) -> tuple[tuple[float, float], ...]:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    wh = np.stack([b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], axis=1)
    return tuple((float(w), float(h)) for w, h in kmeans_box_shapes(wh, k))


def generate_anchors(
    feature_shape: tuple[int, int],
    stride: int = 4,
    shapes: Optional[Sequence[tuple[float, float]]] = None,
    training_boxes: Optional[np.ndarray] = None,
    k: int = 9,
) -> np.ndarray:
    """``(h * w * A, 4)`` anchors, cell-major, centred at ``(j + 0.5) * stride``.

    Shapes come from k-means over ``training_boxes`` when given, else from
    ``shapes``, else the 3 scales x 3 aspects default.
    """
    h, w = feature_shape
    if h < 1 or w < 1:
        raise ValueError(f"feature shape must be positive, got {feature_shape}")
    if training_boxes is not None and len(training_boxes):
        shapes = anchor_shapes_from_boxes(training_boxes, k)
    elif shapes is None:
        shapes = default_anchor_shapes()
    wh = np.asarray(shapes, dtype=np.float64).reshape(-1, 2)
    cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    c = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
    half = wh[None, :, :] / 2
    return np.concatenate([c - half, c + half], axis=-1).reshape(-1, 4)


# ---------------------------------------------------------------------------
# Geometry helpers


def roi_align(fmap: torch.Tensor, boxes, size: int, image_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear samples at the ``size x size`` bin centres of each image-space box.

    ``fmap`` is ``(C, h, w)`` covering the whole image; returns ``(N, C, size, size)``.
    """
    b = torch.as_tensor(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), dtype=fmap.dtype)
    n = len(b)
    if n == 0:
        return fmap.new_zeros((0, fmap.shape[0], size, size))
    ih, iw = image_hw
    t = (torch.arange(size, dtype=fmap.dtype) + 0.5) / size
    xs = b[:, 0:1] + t[None, :] * (b[:, 2:3] - b[:, 0:1])
    ys = b[:, 1:2] + t[None, :] * (b[:, 3:4] - b[:, 1:2])
    # image coordinate x maps to 2x/W - 1 under align_corners=False
    gx = (2 * xs / iw - 1)[:, None, :].expand(n, size, size)
    gy = (2 * ys / ih - 1)[:, :, None].expand(n, size, size)
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(fmap.unsqueeze(0).expand(n, -1, -1, -1), grid, mode="bilinear", padding_mode="border", align_corners=False)


def expand_boxes(boxes: np.ndarray, factor: float, height: int, width: int) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx, cy = (b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2
    hw, hh = (b[:, 2] - b[:, 0]) * factor / 2, (b[:, 3] - b[:, 1]) * factor / 2
    return clip_boxes(np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1), height, width)


def paste_mask(logits: torch.Tensor, box: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample ``m x m`` logits onto the image pixels whose centres lie in
    ``box``; a pixel is on where the interpolated logit is > 0 (sigmoid > 0.5)."""
    x0, y0, x1, y1 = (float(v) for v in box)
    out = np.zeros((height, width), dtype=bool)
    cols = np.flatnonzero(((np.arange(width) + 0.5) >= x0) & ((np.arange(width) + 0.5) < x1))
    rows = np.flatnonzero(((np.arange(height) + 0.5) >= y0) & ((np.arange(height) + 0.5) < y1))
    if len(cols) == 0 or len(rows) == 0:
        return out
    gx = torch.from_numpy(2 * (cols + 0.5 - x0) / (x1 - x0) - 1).to(logits.dtype)
    gy = torch.from_numpy(2 * (rows + 0.5 - y0) / (y1 - y0) - 1).to(logits.dtype)
    grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1)[None]
    vals = F.grid_sample(logits[None, None], grid, mode="bilinear", padding_mode="border", align_corners=False)[0, 0]
    out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = vals.detach().numpy() > 0
    return out


# ---------------------------------------------------------------------------
# Model


@dataclass
class CascadeOutput:
    anchor_scores: torch.Tensor  # (A,) objectness logits over all anchors
    proposals: np.ndarray  # (P, 4) stage-1 boxes that survived
    refined: np.ndarray  # (N, 4) stage-2 boxes after NMS
    mask_boxes: np.ndarray  # (N, 4) enlarged boxes the masks live in
    mask_logits: torch.Tensor  # (N, m, m)
    instance_scores: torch.Tensor  # (N, K+1) logits, column 0 is background


class CascadeSegmenter(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.backbone_channels
        a = len(cfg.shapes)
        self.conv1 = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, padding=1)
        # stage 1
        self.rpn_conv = nn.Conv2d(c3, c3, 3, padding=1)
        self.rpn_obj = nn.Conv2d(c3, a, 1)
        self.rpn_delta = nn.Conv2d(c3, 4 * a, 1)
        # stage 2
        self.refine_fc = nn.Linear(c3 * cfg.align_size**2, cfg.refine_width)
        self.refine_out = nn.Linear(cfg.refine_width, 4)
        # stage 3 sees full-resolution features, the input and the coarse features
        fine = c1 + cfg.in_channels + c3
        self.mask_conv1 = nn.Conv2d(fine, cfg.mask_channels, 3, padding=1)
        self.mask_conv2 = nn.Conv2d(cfg.mask_channels, cfg.mask_channels, 3, padding=1)
        self.mask_out = nn.Conv2d(cfg.mask_channels, 1, 1)
        # stage 4
        self.cls_fc = nn.Linear(cfg.mask_channels, cfg.cls_width)
        self.cls_out = nn.Linear(cfg.cls_width, cfg.num_subregions + 1)
        for m in (self.rpn_delta, self.refine_out):
            nn.init.normal_(m.weight, std=0.001)
            nn.init.zeros_(m.bias)

    @property
    def stage_heads(self) -> dict[str, list[nn.Module]]:
        return {
            "anchors": [self.rpn_conv, self.rpn_obj, self.rpn_delta],
            "refine": [self.refine_fc, self.refine_out],
            "mask": [self.mask_conv1, self.mask_conv2, self.mask_out],
            "instance": [self.cls_fc, self.cls_out],
        }

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(full-resolution features with the input appended, stride-4 features)."""
        f1 = F.relu(self.conv1(x.unsqueeze(0)))
        f = F.max_pool2d(f1, 2)
        f = F.max_pool2d(F.relu(self.conv2(f)), 2)
        f4 = F.relu(self.conv3(f))
        return torch.cat([f1, x.unsqueeze(0)], dim=1)[0], f4[0]

    def rpn(self, f4: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Objectness ``(h*w*A,)`` and deltas ``(h*w*A, 4)`` in anchor order."""
        h = F.relu(self.rpn_conv(f4.unsqueeze(0)))
        obj = self.rpn_obj(h)[0].permute(1, 2, 0).reshape(-1)
        a = self.rpn_obj.out_channels
        d = self.rpn_delta(h)[0].reshape(a, 4, *f4.shape[-2:]).permute(2, 3, 0, 1).reshape(-1, 4)
        return obj, d

    def refine(self, f4: torch.Tensor, boxes: np.ndarray, image_hw) -> torch.Tensor:
        pooled = roi_align(f4, boxes, self.cfg.align_size, image_hw)
        return self.refine_out(F.relu(self.refine_fc(pooled.flatten(1))))

    def mask_hidden(self, fine: torch.Tensor, f4: torch.Tensor, boxes: np.ndarray, image_hw) -> torch.Tensor:
        m = self.cfg.mask_size
        pooled = torch.cat([roi_align(fine, boxes, m, image_hw), roi_align(f4, boxes, m, image_hw)], dim=1)
        return F.relu(self.mask_conv2(F.relu(self.mask_conv1(pooled))))

    def masks_and_scores(self, fine: torch.Tensor, f4: torch.Tensor, mask_boxes: np.ndarray, image_hw):
        hidden = self.mask_hidden(fine, f4, mask_boxes, image_hw)
        logits = self.mask_out(hidden)[:, 0]
        gate = torch.sigmoid(logits).unsqueeze(1)
        pooled = (hidden * gate).sum(dim=(2, 3)) / (gate.sum(dim=(2, 3)) + 1e-6)
        scores = self.cls_out(F.relu(self.cls_fc(pooled)))
        return logits, scores


def build_segmenter(cfg: SegmenterConfig) -> CascadeSegmenter:
    with seeded(cfg.seed):
        return CascadeSegmenter(cfg)


def _image_tensor(model: CascadeSegmenter, stack: SliceStack) -> torch.Tensor:
    if stack.channels != model.cfg.in_channels:
        raise WrongChannels(f"segmenter expects {model.cfg.in_channels} channels, got {stack.channels}")
    return torch.from_numpy(stack.chw()).to(next(model.parameters()).dtype)


def _anchors_for(model: CascadeSegmenter, f4: torch.Tensor) -> np.ndarray:
    return generate_anchors(tuple(f4.shape[-2:]), model.cfg.stride, model.cfg.shapes)


def _decode_refine(d: torch.Tensor, boxes: np.ndarray) -> np.ndarray:
    std = np.asarray(REFINE_STD)
    return decode_deltas(d.detach().double().numpy() * std, boxes)


def _select_proposals(model, obj: torch.Tensor, deltas: torch.Tensor, anchors: np.ndarray, hw, threshold: Optional[float], top: int):
    cfg = model.cfg
    score = torch.sigmoid(obj.detach().double()).numpy()
    order = np.argsort(-score, kind="stable")[: cfg.pre_nms_top]
    if threshold is not None:
        order = order[score[order] > threshold]
    if len(order) == 0:
        return np.zeros((0, 4)), np.zeros(0)
    boxes = clip_boxes(decode_deltas(deltas.detach().double().numpy()[order], anchors[order]), *hw)
    ok = valid_boxes(boxes, 1.0)
    boxes, s = boxes[ok], score[order][ok]
    keep = nms(boxes, s, cfg.rpn_nms)[:top]
    return boxes[keep], s[keep]


def cascade_forward(model: CascadeSegmenter, stack: SliceStack, objectness_threshold: Optional[float] = None) -> CascadeOutput:
    """Run the four stages; every stage consumes the previous stage's boxes."""
    cfg = model.cfg
    thr = cfg.objectness_threshold if objectness_threshold is None else objectness_threshold
    x = _image_tensor(model, stack)
    hw = (stack.height, stack.width)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            fine, f4 = model.features(x)
            obj, d = model.rpn(f4)
            anchors = _anchors_for(model, f4)
            props, _ = _select_proposals(model, obj, d, anchors, hw, thr, cfg.post_nms_top)
            empty = CascadeOutput(obj, props, np.zeros((0, 4)), np.zeros((0, 4)), x.new_zeros((0, cfg.mask_size, cfg.mask_size)), x.new_zeros((0, cfg.num_subregions + 1)))
            if len(props) == 0:
                return empty
            refined = clip_boxes(_decode_refine(model.refine(f4, props, hw), props), *hw)
            ok = valid_boxes(refined, 1.0)
            refined = refined[ok]
            if len(refined) == 0:
                empty.proposals = props
                return empty
            mask_boxes = expand_boxes(refined, cfg.mask_expand, *hw)
            logits, scores = model.masks_and_scores(fine, f4, mask_boxes, hw)
            inst = torch.softmax(scores.double(), dim=1)[:, 1:].max(dim=1).values.numpy()
            keep = nms(refined, inst, cfg.instance_nms)
            return CascadeOutput(obj, props, refined[keep], mask_boxes[keep], logits[keep], scores[keep])
    finally:
        model.train(was_training)


@dataclass
class InstanceMask:
    mask: np.ndarray
    subregion: int
    score: float
    box: BoundingBox = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("instance mask must have at least one positive pixel")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if not 0 <= self.subregion < len(SUBREGIONS):
            raise ValueError(f"subregion index {self.subregion} out of range")
        self.box = box_from_mask(self.mask)

    @property
    def subregion_name(self) -> str:
        return SUBREGIONS[self.subregion]


def resolve_instances(candidates: Sequence[tuple[np.ndarray, int, float]], min_keep: float = 0.5) -> list[InstanceMask]:
    """Assign overlapping pixels to the higher-scoring instance.

    Candidates are ``(mask, subregion, score)``.  A candidate that keeps less
    than ``min_keep`` of its own pixels is mostly a duplicate and is dropped.
    """
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i][2])
    out: list[InstanceMask] = []
    taken = None
    for i in order:
        mask, sub, score = candidates[i]
        mask = np.asarray(mask, dtype=bool)
        area = int(mask.sum())
        if area == 0:
            continue
        if taken is None:
            taken = np.zeros_like(mask)
        own = mask & ~taken
        if own.sum() < min_keep * area or not own.any():
            continue
        taken |= own
        out.append(InstanceMask(own, sub, float(score)))
    return out


def _candidates(model: CascadeSegmenter, stack: SliceStack, score_threshold: Optional[float]):
    """``(cascade output, kept ROI indices, subregions, scores, pasted masks)``."""
    cfg = model.cfg
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    out = cascade_forward(model, stack)
    if len(out.refined) == 0:
        return out, np.zeros(0, int), np.zeros(0, int), np.zeros(0), []
    prob = torch.softmax(out.instance_scores.double(), dim=1).numpy()
    sub = prob[:, 1:].argmax(axis=1)
    score = prob[np.arange(len(sub)), sub + 1]
    keep = np.flatnonzero(score > thr)
    masks = [paste_mask(out.mask_logits[i], out.mask_boxes[i], stack.height, stack.width) for i in keep]
    return out, keep, sub[keep], score[keep], masks


def segment_instances(model: CascadeSegmenter, stack: SliceStack, score_threshold: Optional[float] = None) -> list[InstanceMask]:
    _, _, sub, score, masks = _candidates(model, stack, score_threshold)
    return resolve_instances([(m, int(k), float(p)) for m, k, p in zip(masks, sub, score)])


STAGES = ("box", "mask", "instance")


def stage_predictions(model: CascadeSegmenter, stack: SliceStack, score_threshold: Optional[float] = None) -> dict[str, list[tuple[np.ndarray, int]]]:
    """Per-stage ``(pixel mask, subregion)`` predictions for the kept ROIs.

    ``box`` fills the refined boxes, ``mask`` pastes the raw mask logits
    before overlap resolution, ``instance`` is the final resolved output.
    """
    out, keep, sub, score, masks = _candidates(model, stack, score_threshold)
    boxes = [boxes_to_mask(np.asarray(out.refined[i], dtype=float)[None], stack.height, stack.width) for i in keep]
    inst = resolve_instances([(m, int(k), float(p)) for m, k, p in zip(masks, sub, score)])
    return {
        "box": [(b, int(k)) for b, k in zip(boxes, sub)],
        "mask": [(m, int(k)) for m, k in zip(masks, sub)],
        "instance": [(i.mask, i.subregion) for i in inst],
    }


# ---------------------------------------------------------------------------
# Training


@dataclass
class SegmentationSample:
    stack: SliceStack
    masks: list[np.ndarray]
    subregions: list[int]

    @property
    def boxes(self) -> np.ndarray:
        if not self.masks:
            return np.zeros((0, 4))
        return np.stack([box_from_mask(m).as_array() for m in self.masks])


@dataclass
class TrainPlan:
    """All discrete choices of one training step, fixed ahead of the loss."""

    anchor_idx: np.ndarray
    anchor_labels: np.ndarray
    anchor_deltas: np.ndarray
    rois: np.ndarray
    roi_pos: np.ndarray
    roi_deltas: np.ndarray
    mask_boxes: np.ndarray
    mask_targets: np.ndarray
    cls_labels: np.ndarray


def mask_targets(truth: np.ndarray, boxes: np.ndarray, size: int) -> np.ndarray:
    """Binary ``(N, size, size)`` targets: the truth mask sampled at the bin
    centres of each box (bilinear), thresholded at 0.5."""
    t = torch.from_numpy(np.asarray(truth, dtype=np.float64))
    hw = t.shape[-2:]
    out = []
    for b, m in zip(boxes, t):
        out.append(roi_align(m[None], b[None], size, hw)[0, 0] >= 0.5)
    if not out:
        return np.zeros((0, size, size), dtype=bool)
    return torch.stack(out).numpy()


def make_plan(model: CascadeSegmenter, sample: SegmentationSample, rng: np.random.Generator) -> TrainPlan:
    cfg = model.cfg
    stack = sample.stack
    hw = (stack.height, stack.width)
    truth = sample.boxes
    x = _image_tensor(model, stack)
    with torch.no_grad():
        fine, f4 = model.features(x)
        obj, d = model.rpn(f4)
    anchors = _anchors_for(model, f4)

    # stage 1 targets: IoU >= 0.5 or best anchor per truth -> 1, IoU < 0.3 -> 0
    iou = box_iou(anchors, truth)
    best = iou.argmax(axis=1)
    best_iou = iou.max(axis=1)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    labels[best_iou < 0.3] = 0
    labels[best_iou >= 0.5] = 1
    labels[iou.argmax(axis=0)] = 1
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), cfg.rpn_batch // 2)
    pos = rng.choice(pos, n_pos, replace=False) if len(pos) > n_pos else pos
    neg = rng.choice(neg, min(len(neg), cfg.rpn_batch - len(pos)), replace=False)
    idx = np.concatenate([pos, neg]).astype(np.int64)
    a_deltas = encode_deltas(truth[best[idx]], anchors[idx])

    # stage 2 inputs: current proposals plus truth and jittered truth boxes
    props, _ = _select_proposals(model, obj, d, anchors, hw, None, cfg.post_nms_top)
    jit = []
    for tb in truth:
        w, h = tb[2] - tb[0], tb[3] - tb[1]
        for _ in range(cfg.jitter_per_truth):
            jit.append(tb + rng.uniform(-0.15, 0.15, 4) * np.array([w, h, w, h]))
    rois = np.concatenate([props, truth, np.asarray(jit).reshape(-1, 4)])
    rois = clip_boxes(rois, *hw)
    rois = rois[valid_boxes(rois, 1.0)]
    r_iou = box_iou(rois, truth)
    r_best = r_iou.argmax(axis=1)
    r_pos = r_iou.max(axis=1) >= 0.5
    r_deltas = np.zeros((len(rois), 4))
    if r_pos.any():
        r_deltas[r_pos] = encode_deltas(truth[r_best[r_pos]], rois[r_pos]) / np.asarray(REFINE_STD)

    # stages 3-4 run on the current refined boxes
    with torch.no_grad():
        refined = clip_boxes(_decode_refine(model.refine(f4, rois, hw), rois), *hw)
    ok = valid_boxes(refined, 1.0)
    refined = refined[ok]
    m_iou = box_iou(refined, truth)
    m_best = m_iou.argmax(axis=1)
    m_max = m_iou.max(axis=1)
    cls = np.full(len(refined), -1, dtype=np.int64)
    cls[m_max < 0.3] = 0
    fg = m_max >= 0.5
    cls[fg] = np.asarray(sample.subregions, dtype=np.int64)[m_best[fg]] + 1
    keep = cls >= 0
    refined, cls, m_best = refined[keep], cls[keep], m_best[keep]
    mask_boxes = expand_boxes(refined, cfg.mask_expand, *hw)
    masks = np.stack(sample.masks)[m_best] if len(refined) else np.zeros((0,) + hw, dtype=bool)
    targets = mask_targets(masks, mask_boxes, cfg.mask_size)
    return TrainPlan(idx, labels[idx], a_deltas, rois, r_pos, r_deltas, mask_boxes, targets, cls)


def plan_loss(model: CascadeSegmenter, stack: SliceStack, plan: TrainPlan):
    """Joint loss given fixed discrete choices; returns (total, parts)."""
    cfg = model.cfg
    hw = (stack.height, stack.width)
    x = _image_tensor(model, stack)
    dt = x.dtype
    fine, f4 = model.features(x)
    obj, d = model.rpn(f4)
    idx = torch.from_numpy(plan.anchor_idx)
    rpn_cls = F.binary_cross_entropy_with_logits(obj[idx], torch.from_numpy(plan.anchor_labels).to(dt))
    a_pos = torch.from_numpy(plan.anchor_labels == 1)
    zero = obj.sum() * 0.0
    rpn_reg = smooth_l1_torch(d[idx][a_pos], torch.from_numpy(plan.anchor_deltas).to(dt)[a_pos]).mean() if a_pos.any() else zero
    ref = model.refine(f4, plan.rois, hw)
    r_pos = torch.from_numpy(plan.roi_pos)
    ref_reg = smooth_l1_torch(ref[r_pos], torch.from_numpy(plan.roi_deltas).to(dt)[r_pos]).mean() if r_pos.any() else zero
    if len(plan.mask_boxes):
        logits, scores = model.masks_and_scores(fine, f4, plan.mask_boxes, hw)
        labels = torch.from_numpy(plan.cls_labels)
        inst_cls = F.cross_entropy(scores, labels)
        fg = labels > 0
        if fg.any():
            mask = F.binary_cross_entropy_with_logits(logits[fg], torch.from_numpy(plan.mask_targets).to(dt)[fg])
        else:
            mask = zero
    else:
        inst_cls = mask = zero
    cls, reg = rpn_cls + inst_cls, rpn_reg + ref_reg
    total = multitask_loss(cls, reg, mask, cfg.loss_weights)
    return total, {"rpn_cls": rpn_cls, "inst_cls": inst_cls, "rpn_reg": rpn_reg, "refine_reg": ref_reg, "mask": mask}


def mask_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy on mask logits."""
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def instance_dice(pred: Sequence[InstanceMask], truth: Sequence[np.ndarray]) -> list[float]:
    """Dice of each truth instance against its best still-unused prediction
    (greedy by Dice); unmatched truths score 0."""
    pairs = []
    for ti, t in enumerate(truth):
        for pi, p in enumerate(pred):
            pairs.append((dice(p.mask, t), ti, pi))
    pairs.sort(key=lambda v: (-v[0], v[1], v[2]))
    used_t, used_p = set(), set()
    scores = [0.0] * len(truth)
    for d, ti, pi in pairs:
        if ti in used_t or pi in used_p:
            continue
        used_t.add(ti)
        used_p.add(pi)
        scores[ti] = d
    return scores


def evaluate_segmenter(model, samples: Sequence[SegmentationSample], seed: int = 0) -> tuple[float, float]:
    """(mean planned loss, mean instance Dice) without updating the model."""
    rng = np.random.default_rng(seed + 104729)
    losses, dices = [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for s in samples:
            losses.append(float(plan_loss(model, s.stack, make_plan(model, s, rng))[0]))
            dices.extend(instance_dice(segment_instances(model, s.stack), s.masks))
    model.train(was_training)
    return float(np.mean(losses)), float(np.mean(dices)) if dices else 1.0


def train_segmenter(
    model: CascadeSegmenter,
    samples: Sequence[SegmentationSample],
    cfg: TrainConfig,
    test_samples: Optional[Sequence[SegmentationSample]] = None,
    history_path=None,
) -> tuple[CascadeSegmenter, TrainHistory]:
    """Joint training of all four stages; the accuracy column is mean instance Dice."""
    samples = [s for s in samples if s.masks]
    if not samples:
        raise EmptyDataset("segmenter training needs at least one annotated slice")
    opt = make_optimizer(model.parameters(), cfg)
    sched = make_scheduler(opt, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = batch_indices(len(samples), min(cfg.batch_size, len(samples)), gen)
    rng = np.random.default_rng(cfg.seed)
    evals = test_samples if test_samples else samples
    history = open_history(history_path)
    test_loss, acc = 0.0, 0.0
    try:
        with seeded(cfg.seed + 1):
            model.train()
            for it in range(1, cfg.iterations + 1):
                total = 0.0
                for i in next(batches):
                    s = samples[i]
                    loss, parts = plan_loss(model, s.stack, make_plan(model, s, rng))
                    check_finite(loss, it, parts)
                    total = total + loss
                value = check_finite(total, it)
                opt.zero_grad()
                total.backward()
                opt.step()
                if sched is not None:
                    sched.step()
                if it == 1 or it % cfg.eval_every == 0 or it == cfg.iterations:
                    test_loss, acc = evaluate_segmenter(model, evals, cfg.seed)
                history.append(it, value, test_loss, acc)
    finally:
        close_history(history)
    model.eval()
    return model, history

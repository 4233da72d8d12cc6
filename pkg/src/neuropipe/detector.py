"""Dual-path lesion detector.

Path B (local) runs a small convolutional backbone, pools each region of
interest into a fixed ``ph x pw`` grid and maps it through a fully-connected
layer.  Path A (global) applies a single convolution to the whole image,
L2-norm pools it and flattens it.  Both feature vectors are concatenated
(local first) and fed to a fusion layer with classification and box heads.

The fusion layer is stored as two blocks, one per path, so that the global
contribution can be removed exactly: ``W [r; g] + b == W_r r + b + W_g g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augmentation import AugmentPolicy, apply_policy, draw_params, transform_boxes
from .boxes import box_iou, clip_boxes, decode_deltas, encode_deltas, nms, valid_boxes
from .errors import BadConfig, EmptyDataset, EmptySubset, MissingTruth, WrongChannels
from .imaging_io import Modality, Provenance, SliceStack
from .nn_primitives import L2Pool2d, multitask_loss, roi_pool_cells, smooth_l1_torch
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

JITTER = "ground-truth-jitter"
GRID = "grid"


@dataclass
class DetectorConfig:
    in_channels: int = 4
    num_categories: int = 1
    # one 3x3 conv per backbone stage; a 2x2 max pool follows stages flagged in backbone_pools
    backbone_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    backbone_pools: tuple[bool, ...] = (True, True, False, False, False)
    spp_size: tuple[int, int] = (3, 3)
    roi_fc_width: int = 128
    global_channels: int = 64
    global_kernel: int = 7
    global_pool: int = 4
    global_grid: int = 4
    fusion_width: int = 128
    loss_weights: tuple[float, float] = (1.0, 1.0)
    proposal_mode: str = JITTER
    jitter_positives: int = 8
    jitter_background: int = 8
    jitter_fraction: float = 0.15
    grid_scales: tuple[int, ...] = (16, 24, 32)
    grid_stride: int = 4
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.backbone_pools = tuple(bool(p) for p in self.backbone_pools)
        self.spp_size = tuple(int(v) for v in self.spp_size)
        self.grid_scales = tuple(int(v) for v in self.grid_scales)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        if len(self.backbone_channels) < 1 or len(self.backbone_pools) != len(self.backbone_channels):
            raise BadConfig("backbone_channels and backbone_pools must be non-empty and equally long")
        if min(self.backbone_channels) < 1 or self.in_channels < 1 or self.num_categories < 1:
            raise BadConfig("channel and category counts must be positive")
        if len(self.spp_size) != 2 or min(self.spp_size) < 1:
            raise BadConfig(f"spp size must be two positive ints, got {self.spp_size}")
        if min(self.roi_fc_width, self.global_channels, self.global_grid, self.fusion_width, self.global_pool) < 1:
            raise BadConfig("widths, pool and grid sizes must be positive")
        if self.global_kernel < 1 or self.global_kernel % 2 == 0:
            raise BadConfig(f"global kernel must be odd, got {self.global_kernel}")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise BadConfig(f"loss weights must be two values >= 0, got {self.loss_weights}")
        if self.proposal_mode not in (JITTER, GRID):
            raise BadConfig(f"unknown proposal mode {self.proposal_mode!r}")
        if not 0 <= self.jitter_fraction <= 0.15:
            raise BadConfig("jitter fraction must be within [0, 0.15]")

    @property
    def stride(self) -> int:
        return 2 ** sum(self.backbone_pools)

    @property
    def roi_feat_width(self) -> int:
        return self.roi_fc_width

    @property
    def global_feat_width(self) -> int:
        return self.global_channels * self.global_grid**2

    @property
    def fused_width(self) -> int:
        return self.roi_feat_width + self.global_feat_width


@dataclass
class Detection:
    box: np.ndarray
    category: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.category < 1:
            raise ValueError(f"category must be a lesion index >= 1, got {self.category}")


@dataclass
class DetectorOutput:
    scores: torch.Tensor  # (R, K+1) logits
    deltas: torch.Tensor  # (R, 4)


class LocalPath(nn.Module):
    """Backbone, ROI pooling and the per-ROI fully-connected layer."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        prev = cfg.in_channels
        for width in cfg.backbone_channels:
            layers.append(nn.Conv2d(prev, width, 3, padding=1))
            prev = width
        self.backbone = nn.ModuleList(layers)
        ph, pw = cfg.spp_size
        self.roi_fc = nn.Linear(prev * ph * pw, cfg.roi_fc_width)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        for conv, pool in zip(self.backbone, self.cfg.backbone_pools):
            x = F.relu(conv(x))
            if pool:
                x = F.max_pool2d(x, 2)
        return x

    def roi_features(self, fmap: torch.Tensor, rois: np.ndarray) -> torch.Tensor:
        """``fmap`` is ``(C, h, w)``; ``rois`` are image-space boxes."""
        ph, pw = self.cfg.spp_size
        pooled = [roi_pool_cells(fmap, c, (ph, pw)) for c in roi_cells_on_map(rois, self.cfg.stride, fmap.shape[-2:], (ph, pw))]
        if not pooled:
            return fmap.new_zeros((0, self.cfg.roi_fc_width))
        return F.relu(self.roi_fc(torch.stack(pooled).flatten(1)))


class GlobalPath(nn.Module):
    """One convolution over the whole image, L2-norm pooling, fixed grid."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.conv = nn.Conv2d(cfg.in_channels, cfg.global_channels, cfg.global_kernel, padding=cfg.global_kernel // 2)
        self.pool = L2Pool2d(cfg.global_pool)
        self.grid = nn.AdaptiveAvgPool2d(cfg.global_grid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.grid(self.pool(F.relu(self.conv(x)))), 1)


class Heads(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cls = nn.Linear(cfg.fusion_width, cfg.num_categories + 1)
        self.reg = nn.Linear(cfg.fusion_width, 4)
        nn.init.normal_(self.reg.weight, std=0.001)
        nn.init.zeros_(self.reg.bias)

    def forward(self, h: torch.Tensor) -> DetectorOutput:
        return DetectorOutput(self.cls(h), self.reg(h))


def roi_cells_on_map(rois: np.ndarray, stride: int, map_hw, min_cells) -> list[tuple[int, int, int, int]]:
    """Snap image-space boxes onto feature cells ``(r0, c0, r1, c1)``.

    Coordinates are divided by the stride and rounded half up; boxes that
    cover fewer cells than the pooling grid are grown symmetrically and
    shifted back inside the map.
    """
    h, w = int(map_hw[0]), int(map_hw[1])
    ph, pw = min_cells
    out = []
    for x0, y0, x1, y1 in np.asarray(rois, dtype=np.float64).reshape(-1, 4):
        c0, r0 = math.floor(x0 / stride + 0.5), math.floor(y0 / stride + 0.5)
        c1, r1 = math.floor(x1 / stride + 0.5), math.floor(y1 / stride + 0.5)
        r0, r1 = _fit_span(r0, r1, ph, h)
        c0, c1 = _fit_span(c0, c1, pw, w)
        out.append((r0, c0, r1, c1))
    return out


def _fit_span(a: int, b: int, need: int, size: int) -> tuple[int, int]:
    a, b = max(a, 0), min(b, size)
    if b - a < need:
        grow = need - max(b - a, 0)
        a -= grow // 2
        b = a + need
    if a < 0:
        a, b = 0, need
    if b > size:
        a, b = size - need, size
    if a < 0:
        raise BadConfig(f"feature map of size {size} cannot hold a {need}-cell pooling grid")
    return a, b


class LocalPathDetector(nn.Module):
    """Single-path reference: local features only, no global path."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.local = LocalPath(cfg)
        self.fuse_local = nn.Linear(cfg.roi_feat_width, cfg.fusion_width)
        self.heads = Heads(cfg)

    def forward(self, image: torch.Tensor, rois: np.ndarray) -> DetectorOutput:
        fmap = self.local.feature_map(image.unsqueeze(0))[0]
        r = self.local.roi_features(fmap, rois)
        return self.heads(F.relu(self.fuse_local(r)))


class DualPathDetector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.local = LocalPath(cfg)
        self.global_path = GlobalPath(cfg)
        # fusion over (roi features || global features), split by source
        self.fuse_local = nn.Linear(cfg.roi_feat_width, cfg.fusion_width)
        self.fuse_global = nn.Linear(cfg.global_feat_width, cfg.fusion_width, bias=False)
        self.heads = Heads(cfg)

    def fused_features(self, image: torch.Tensor, rois: np.ndarray) -> torch.Tensor:
        """The concatenated ``(R, roi_feat_width + global_feat_width)`` vector."""
        fmap = self.local.feature_map(image.unsqueeze(0))[0]
        r = self.local.roi_features(fmap, rois)
        g = self.global_path(image.unsqueeze(0))
        return torch.cat([r, g.expand(len(r), -1)], dim=1)

    def forward(self, image: torch.Tensor, rois: np.ndarray) -> DetectorOutput:
        fmap = self.local.feature_map(image.unsqueeze(0))[0]
        r = self.local.roi_features(fmap, rois)
        g = self.global_path(image.unsqueeze(0))
        h = self.fuse_local(r) + self.fuse_global(g)
        return self.heads(F.relu(h))


def build_detector(cfg: DetectorConfig) -> DualPathDetector:
    with seeded(cfg.seed):
        return DualPathDetector(cfg)


def ablate_global_path(model: DualPathDetector) -> DualPathDetector:
    """Zero every global-path weight in place."""
    with torch.no_grad():
        for p in list(model.global_path.parameters()) + list(model.fuse_global.parameters()):
            p.zero_()
    return model


def local_reference(model: DualPathDetector) -> LocalPathDetector:
    """A single-path model carrying copies of ``model``'s local weights."""
    ref = LocalPathDetector(model.cfg)
    ref.local.load_state_dict(model.local.state_dict())
    ref.fuse_local.load_state_dict(model.fuse_local.state_dict())
    ref.heads.load_state_dict(model.heads.state_dict())
    return ref.to(next(model.parameters()).dtype)


# ---------------------------------------------------------------------------
# Proposals


def propose_rois(
    stack: SliceStack,
    mode: str = JITTER,
    truth: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    cfg: Optional[DetectorConfig] = None,
) -> np.ndarray:
    """``(N, 4)`` image-space proposals.

    Jitter mode perturbs each truth box by at most ``jitter_fraction`` of its
    size and adds background boxes whose IoU with every truth box is below
    0.3.  Grid mode tiles square boxes of each scale at the grid stride.
    """
    cfg = cfg or DetectorConfig()
    h, w = stack.height, stack.width
    if mode == GRID:
        return grid_proposals(h, w, cfg.grid_scales, cfg.grid_stride)
    if mode != JITTER:
        raise BadConfig(f"unknown proposal mode {mode!r}")
    if truth is None or len(truth) == 0:
        raise MissingTruth("jitter proposals need at least one truth box")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 4)
    out = [truth.copy()]
    f = cfg.jitter_fraction
    for tb in truth:
        bw, bh = tb[2] - tb[0], tb[3] - tb[1]
        for _ in range(cfg.jitter_positives):
            dx0, dy0, dx1, dy1 = rng.uniform(-f, f, size=4)
            out.append(
                np.array([[tb[0] + dx0 * bw, tb[1] + dy0 * bh, tb[2] + dx1 * bw, tb[3] + dy1 * bh]])
            )
    sizes = np.concatenate([truth[:, 2] - truth[:, 0], truth[:, 3] - truth[:, 1]])
    lo, hi = max(4.0, 0.5 * sizes.min()), min(max(h, w) / 2, 1.5 * sizes.max())
    found = 0
    for _ in range(50 * cfg.jitter_background):
        if found == cfg.jitter_background:
            break
        bw, bh = rng.uniform(lo, max(lo, hi), size=2)
        x0, y0 = rng.uniform(0, max(w - bw, 0)), rng.uniform(0, max(h - bh, 0))
        cand = np.array([[x0, y0, x0 + bw, y0 + bh]])
        if box_iou(cand, truth).max() < 0.3:
            out.append(cand)
            found += 1
    boxes = clip_boxes(np.concatenate(out), h, w)
    return boxes[valid_boxes(boxes, 1.0)]


def grid_proposals(height: int, width: int, scales: Sequence[int], stride: int) -> np.ndarray:
    boxes = []
    for s in scales:
        if s > height or s > width:
            continue
        for y in range(0, height - s + 1, stride):
            for x in range(0, width - s + 1, stride):
                boxes.append((x, y, x + s, y + s))
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# Channels


def modality_subset(stack: SliceStack, keep, fixed_arity: bool = False) -> SliceStack:
    """Restrict a modality stack to ``keep`` in canonical order.

    With ``fixed_arity`` the channel count is preserved and dropped channels
    are zero-filled; the provenance then carries a ``zero-filled:...`` flag.
    """
    keep = {Modality.parse(m) for m in keep}
    if not keep:
        raise EmptySubset("modality subset must not be empty")
    missing = keep - set(stack.channel_tags)
    if missing:
        raise WrongChannels(f"stack has no channel for {sorted(m.value for m in missing)}")
    if fixed_arity:
        px = stack.pixels.copy()
        dropped = [t for t in stack.channel_tags if t not in keep]
        for t in dropped:
            px[:, :, stack.channel_tags.index(t)] = 0
        flags = stack.provenance.flags
        if dropped:
            flags = flags + ("zero-filled:" + "+".join(t.value for t in dropped),)
        return SliceStack(px, stack.channel_tags, replace(stack.provenance, flags=flags), stack.normalized)
    tags = tuple(sorted(keep, key=lambda m: m.rank))
    idx = [stack.channel_tags.index(t) for t in tags]
    return SliceStack(stack.pixels[:, :, idx].copy(), tags, stack.provenance, stack.normalized)


def _image_tensor(model: nn.Module, stack: SliceStack) -> torch.Tensor:
    if stack.channels != model.cfg.in_channels:
        raise WrongChannels(f"detector expects {model.cfg.in_channels} channels, got {stack.channels}")
    return torch.from_numpy(stack.chw()).to(next(model.parameters()).dtype)


# ---------------------------------------------------------------------------
# Training


def assign_targets(rois: np.ndarray, truth: np.ndarray, categories: Sequence[int]):
    """Per-ROI class targets (-1 ignore, 0 background, k category) and
    delta targets for the positives."""
    labels = np.zeros(len(rois), dtype=np.int64)
    deltas = np.zeros((len(rois), 4))
    if len(truth) == 0:
        return labels, deltas
    iou = box_iou(rois, truth)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(rois)), best]
    cats = np.asarray(categories, dtype=np.int64)
    labels[best_iou >= 0.5] = cats[best[best_iou >= 0.5]]
    labels[(best_iou >= 0.3) & (best_iou < 0.5)] = -1
    pos = labels > 0
    if pos.any():
        deltas[pos] = encode_deltas(truth[best[pos]], rois[pos])
    return labels, deltas


def detection_loss(out: DetectorOutput, labels: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0)):
    keep = labels >= 0
    cls = F.cross_entropy(out.scores[keep], labels[keep]) if keep.any() else out.scores.sum() * 0.0
    pos = labels > 0
    reg = smooth_l1_torch(out.deltas[pos], deltas[pos]).mean() if pos.any() else out.deltas.sum() * 0.0
    return multitask_loss(cls, reg, None, (weights[0], weights[1], 0.0)), cls, reg


@dataclass
class DetectionSample:
    stack: SliceStack
    boxes: np.ndarray
    categories: Sequence[int]


def train_detector(
    model: DualPathDetector,
    samples: Sequence[DetectionSample],
    cfg: TrainConfig,
    test_samples: Optional[Sequence[DetectionSample]] = None,
    augment: Optional[AugmentPolicy] = None,
    history_path=None,
) -> tuple[DualPathDetector, TrainHistory]:
    """Each iteration draws fresh jittered proposals for a minibatch of slices.

    The history's accuracy column is the fraction of evaluation slices whose
    top detection overlaps a truth box with IoU >= 0.5.
    """
    samples = [s for s in samples if len(s.boxes)]
    if not samples:
        raise EmptyDataset("detector training needs at least one annotated slice")
    dcfg = model.cfg
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
                    stack, boxes = s.stack, s.boxes
                    if augment is not None:
                        draw = it * len(samples) + i
                        stack = apply_policy(s.stack, augment, draw)
                        boxes = transform_boxes(s.boxes, draw_params(augment, draw), s.stack.height, s.stack.width, (stack.height, stack.width))
                    rois = propose_rois(stack, JITTER, boxes, rng, dcfg)
                    labels, deltas = assign_targets(rois, boxes, s.categories)
                    out = model(_image_tensor(model, stack), rois)
                    dt = next(model.parameters()).dtype
                    loss, cls, reg = detection_loss(out, torch.from_numpy(labels), torch.from_numpy(deltas).to(dt), dcfg.loss_weights)
                    check_finite(loss, it, {"cls": cls, "reg": reg})
                    total = total + loss
                value = check_finite(total, it)
                opt.zero_grad()
                total.backward()
                opt.step()
                if sched is not None:
                    sched.step()
                if it == 1 or it % cfg.eval_every == 0 or it == cfg.iterations:
                    test_loss, acc = evaluate_detector(model, evals, seed=cfg.seed)
                history.append(it, value, test_loss, acc)
    finally:
        close_history(history)
    model.eval()
    return model, history


def evaluate_detector(model, samples: Sequence[DetectionSample], seed: int = 0, mode: str = GRID) -> tuple[float, float]:
    """(mean loss on jittered proposals, top-detection hit rate at IoU 0.5).

    The hit rate uses grid proposals by default, so it never sees the truth.
    """
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed + 7919)
    losses, hits = [], 0
    with torch.no_grad():
        for s in samples:
            rois = propose_rois(s.stack, JITTER, s.boxes, rng, model.cfg)
            labels, deltas = assign_targets(rois, s.boxes, s.categories)
            out = model(_image_tensor(model, s.stack), rois)
            dt = next(model.parameters()).dtype
            loss, _, _ = detection_loss(out, torch.from_numpy(labels), torch.from_numpy(deltas).to(dt), model.cfg.loss_weights)
            losses.append(float(loss))
            props = rois if mode == JITTER else None
            dets = detect(model, s.stack, proposals=props, score_threshold=0.0)
            if dets and len(s.boxes) and box_iou(dets[0].box, s.boxes).max() >= 0.5:
                hits += 1
    model.train(was_training)
    return float(np.mean(losses)), hits / len(samples)


# ---------------------------------------------------------------------------
# Inference


def detect(
    model,
    stack: SliceStack,
    proposals: Optional[np.ndarray] = None,
    score_threshold: Optional[float] = None,
    nms_iou: Optional[float] = None,
) -> list[Detection]:
    """Score proposals, refine and clip their boxes, keep scores above the
    threshold, suppress overlaps and sort by descending score."""
    cfg = model.cfg
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    iou_thr = cfg.nms_iou if nms_iou is None else nms_iou
    x = _image_tensor(model, stack)
    rois = grid_proposals(stack.height, stack.width, cfg.grid_scales, cfg.grid_stride) if proposals is None else proposals
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if len(rois) == 0:
        return []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x, rois)
    model.train(was_training)
    prob = torch.softmax(out.scores.double(), dim=1).numpy()
    cat = prob[:, 1:].argmax(axis=1) + 1
    score = prob[np.arange(len(rois)), cat]
    boxes = clip_boxes(decode_deltas(out.deltas.double().numpy(), rois), stack.height, stack.width)
    keep = (score > thr) & valid_boxes(boxes)
    boxes, score, cat = boxes[keep], score[keep], cat[keep]
    dets = []
    for k in np.unique(cat):
        idx = np.flatnonzero(cat == k)
        for j in nms(boxes[idx], score[idx], iou_thr):
            i = idx[j]
            dets.append(Detection(boxes[i], int(cat[i]), float(score[i])))
    dets.sort(key=lambda d: (-d.score, tuple(d.box)))
    return dets


def detection_mask(dets: Sequence[Detection], height: int, width: int, top_k: Optional[int] = None) -> np.ndarray:
    """Union of detection boxes (optionally the top ``k``) rasterized by pixel centre."""
    from .boxes import boxes_to_mask

    chosen = list(dets)[: top_k if top_k is not None else None]
    if not chosen:
        return np.zeros((height, width), dtype=bool)
    return boxes_to_mask(np.stack([d.box for d in chosen]), height, width)

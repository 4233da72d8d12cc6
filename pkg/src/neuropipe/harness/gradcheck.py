"""Finite-difference gradient suite over the hand-written operators and tiny
end-to-end networks (float64, central differences, eps = 1e-3)."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..boxes import BoundingBox
from ..classifier import ClassifierConfig, build_classifier
from ..detector import DetectorConfig, build_detector, detection_loss
from ..imaging_io import Modality, SliceStack
from ..nn_primitives import (
    PoolSpec,
    Roi,
    l2pool_backward,
    l2pool_backward_reference,
    l2pool_forward,
    max_relative_error,
    multiclass_hinge_loss,
    numeric_gradient,
    parameter_gradient_check,
    roi_spp_pool,
    smooth_l1,
    softmax_ce,
)
from ..segmenter import SegmentationSample, SegmenterConfig, build_segmenter, make_plan, plan_loss
from ..training import seeded

OPERATOR_TOL = 1e-4
NETWORK_TOL = 1e-3
EPS = 1e-3
KINK_TOL = 2e-4
# entries that must survive the kink screen for a network check to count
MIN_CHECKED = 8


@dataclass
class GradCheckEntry:
    name: str
    error: float
    tolerance: float
    checked: int
    total: int
    attempts: int = 1

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance and self.checked >= min(MIN_CHECKED, self.total)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.error:.3e} (tol {self.tolerance:.0e}, {self.checked}/{self.total} entries, input draws {self.attempts})"


def _op(name: str, analytic: np.ndarray, numeric: np.ndarray) -> GradCheckEntry:
    return GradCheckEntry(name, max_relative_error(analytic, numeric), OPERATOR_TOL, analytic.size, analytic.size)


def check_l2pool(rng: np.random.Generator) -> list[GradCheckEntry]:
    out = []
    for window, stride in (((2, 2), (2, 2)), ((3, 3), (2, 2)), ((2, 3), (1, 2))):
        spec = PoolSpec(window, stride)
        x = rng.standard_normal((2, 7, 8))
        oh, ow = spec.output_shape(7, 8)
        g = rng.standard_normal((2, oh, ow))
        num = numeric_gradient(lambda z: float((l2pool_forward(z, spec) * g).sum()), x, EPS)
        name = f"l2pool window={window} stride={stride}"
        # dual route: the scalar-loop backward and the autograd operator
        out.append(_op(name + " [reference]", l2pool_backward_reference(x, spec, g), num))
        out.append(_op(name + " [autograd]", np.asarray(l2pool_backward(x, spec, g)), num))
    return out


def check_losses(rng: np.random.Generator) -> list[GradCheckEntry]:
    out = []
    # hinge: keep every margin term at least 0.1 away from its switch point
    while True:
        s = rng.standard_normal(5) * 2
        m = 1.0 + s - s[2]
        if np.all(np.abs(np.delete(m, 2)) > 0.1):
            break
    out.append(_op("multiclass hinge", multiclass_hinge_loss(s, 2)[1], numeric_gradient(lambda z: multiclass_hinge_loss(z, 2)[0], s, EPS)))
    s = rng.standard_normal(6) * 3
    out.append(_op("softmax cross-entropy", softmax_ce(s, 4)[1], numeric_gradient(lambda z: softmax_ce(z, 4)[0], s, EPS)))
    t = rng.standard_normal(8)
    u = rng.choice([-1, 1], 8) * rng.uniform(0.1, 0.8, 8)
    u[:4] += np.sign(u[:4]) * 1.0  # half the entries on the linear branch
    p = t + u
    out.append(_op("smooth l1", smooth_l1(p, t)[1], numeric_gradient(lambda z: smooth_l1(z, t)[0], p, EPS)))
    return out


def check_roi_pooling(rng: np.random.Generator) -> list[GradCheckEntry]:
    x = rng.standard_normal((2, 10, 12))
    roi = Roi(BoundingBox(1.0, 2.0, 11.0, 9.0), (3, 2))
    g = rng.standard_normal(np.asarray(roi_spp_pool(x, roi)).shape)
    xt = torch.tensor(x, requires_grad=True)
    (roi_spp_pool(xt, roi) * torch.from_numpy(g)).sum().backward()
    num = numeric_gradient(lambda z: float((np.asarray(roi_spp_pool(z, roi)) * g).sum()), x, EPS)
    return [_op("roi spatial pyramid pooling", xt.grad.numpy(), num)]


def _network(name: str, make: Callable, n: int, rng: np.random.Generator, attempts: int = 3) -> GradCheckEntry:
    """Check ``n`` random entries of the parameter returned by ``make(rng)``.

    ``make`` draws a fresh input and returns ``(loss_fn, param)``.  When the
    kink screen leaves fewer than MIN_CHECKED entries the input sits on a
    switch point of the whole loss, so a new input is drawn.
    """
    for attempt in range(1, attempts + 1):
        loss_fn, param = make(rng)
        all_idx = list(np.ndindex(*param.shape))
        pick = rng.choice(len(all_idx), min(n, len(all_idx)), replace=False)
        idx = [all_idx[i] for i in sorted(pick)]
        res = parameter_gradient_check(loss_fn, param, idx, EPS, kink_tol=KINK_TOL, detail=True)
        entry = GradCheckEntry(name, res.max_rel_error, NETWORK_TOL, res.checked, len(idx), attempt)
        if entry.checked >= min(MIN_CHECKED, entry.total):
            break
    return entry


def check_networks(rng: np.random.Generator) -> list[GradCheckEntry]:
    with seeded(0):
        clf = build_classifier(ClassifierConfig(input_side=32, channels=(2,) * 7, fc_width=8, fc_grid=1, dropout=0.0)).double()
        det = build_detector(
            DetectorConfig(in_channels=2, backbone_channels=(4,) * 5, roi_fc_width=8, global_channels=4, global_grid=2, fusion_width=8, spp_size=(2, 2))
        ).double()
        seg = build_segmenter(SegmenterConfig(backbone_channels=(3, 3, 3), refine_width=6, mask_channels=3, cls_width=4, align_size=3, mask_size=6)).double()

    def classifier(param):
        def make(r):
            x = torch.from_numpy(r.random((1, 3, 32, 32)))
            y = torch.tensor([3])
            return (lambda: clf.loss(clf(x), y)), param

        return make

    def detector(param):
        rois = np.array([[0, 0, 12, 12], [4, 2, 16, 14]], dtype=float)
        labels = torch.tensor([1, 0])
        deltas = torch.tensor([[0.1, -0.2, 0.05, 0.0], [0, 0, 0, 0]], dtype=torch.float64)

        def make(r):
            img = torch.from_numpy(r.random((2, 16, 16)))
            return (lambda: detection_loss(det(img, rois), labels, deltas)[0]), param

        return make

    def segmenter(param):
        mask = np.zeros((32, 32), dtype=bool)
        yy, xx = np.mgrid[:32, :32]
        mask[(yy - 14) ** 2 / 36 + (xx - 17) ** 2 / 49 <= 1] = True

        def make(r):
            px = r.random((32, 32, 4)) * 0.2 + mask[..., None] * np.array([0.0, 0.5, 0.3, 0.8])
            sample = SegmentationSample(SliceStack(px, (Modality.T1, Modality.T1c, Modality.T2, Modality.FLAIR)), [mask], [3])
            plan = make_plan(seg, sample, np.random.default_rng(0))
            return (lambda: plan_loss(seg, sample.stack, plan)[0]), param

        return make

    return [
        _network("classifier conv1 weight", classifier(clf.convs[0].weight), 54, rng),
        _network("classifier fc1 weight", classifier(clf.fcs[0].weight), 16, rng),
        _network("detector backbone weight", detector(det.local.backbone[0].weight), 72, rng),
        _network("detector global-path weight", detector(det.global_path.conv.weight), 80, rng),
        _network("segmenter backbone weight", segmenter(seg.conv1.weight), 40, rng),
        _network("segmenter mask-head weight", segmenter(seg.mask_conv1.weight), 40, rng),
    ]


def run_gradient_suite(seed: int = 0) -> list[GradCheckEntry]:
    rng = np.random.default_rng(seed)
    return check_l2pool(rng) + check_losses(rng) + check_roi_pooling(rng) + check_networks(rng)


def main_report(seed: int = 0, echo=print) -> bool:
    start = time.perf_counter()
    entries = run_gradient_suite(seed)
    for e in entries:
        echo(e.line())
    ok = all(e.passed for e in entries)
    echo(f"{'PASS' if ok else 'FAIL'} gradient suite: {sum(e.passed for e in entries)}/{len(entries)} checks in {time.perf_counter() - start:.1f}s")
    return ok

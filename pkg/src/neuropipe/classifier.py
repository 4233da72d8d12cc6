"""Five-category slice classifier.

Input is a three-channel image whose channels are the axial, coronal and
sagittal centre slices of one volume.  Seven 3x3 convolutions with average
pooling after the third and max pooling after the fifth and sixth feed three
fully-connected layers, dropout, and a 5-way linear head trained with a
margin (multiclass hinge) or softmax objective.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augmentation import AugmentPolicy, apply_policy
from .errors import BadConfig, EmptyDataset, WrongChannels, WrongSize
from .imaging_io import Plane, SliceStack, resize_bilinear
from .labels import LesionClass
from .nn_primitives import hinge_loss_torch, l2pool2d
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

__all__ = [
    "LesionClass",
    "ClassifierConfig",
    "Classifier",
    "build_classifier",
    "classifier_forward",
    "stack_to_tensor",
    "train_classifier",
    "predict_class",
    "evaluate_classifier",
    "fit_svm_head",
    "parameter_count",
]

NUM_CLASSES = len(LesionClass)
PLANE_TAGS = (Plane.AXIAL, Plane.CORONAL, Plane.SAGITTAL)
# default pooling after each conv layer; any entry may be none, avg, max or l2
POOL_AFTER = ("none", "none", "avg", "none", "max", "max", "none")
POOL_KINDS = ("none", "avg", "max", "l2")


@dataclass
class ClassifierConfig:
    input_side: int = 256
    channels: tuple[int, ...] = (64, 128, 256, 256, 512, 512, 512)
    kernel_sizes: Union[int, tuple[int, ...]] = 3
    fc_width: int = 4096
    # conv7 output is average-pooled to fc_grid x fc_grid before fc1
    fc_grid: int = 6
    dropout: float = 0.5
    head: str = "margin"
    margin: float = 1.0
    in_channels: int = 3
    pools: tuple[str, ...] = POOL_AFTER
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 7 or min(self.channels) < 1:
            raise BadConfig(f"need 7 positive conv widths, got {self.channels}")
        ks = self.kernel_sizes
        self.kernel_sizes = (int(ks),) * 7 if isinstance(ks, (int, np.integer)) else tuple(int(k) for k in ks)
        if len(self.kernel_sizes) != 7 or min(self.kernel_sizes) < 1:
            raise BadConfig(f"need 7 positive kernel sizes, got {self.kernel_sizes}")
        if self.fc_width < 1 or self.fc_grid < 1:
            raise BadConfig("fc_width and fc_grid must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head not in ("margin", "softmax"):
            raise BadConfig(f"head must be 'margin' or 'softmax', got {self.head!r}")
        if self.input_side < 32:
            raise BadConfig(f"input side must be >= 32, got {self.input_side}")
        if self.margin <= 0:
            raise BadConfig(f"margin must be > 0, got {self.margin}")
        self.pools = tuple(str(p) for p in self.pools)
        if len(self.pools) != 7 or any(p not in POOL_KINDS for p in self.pools):
            raise BadConfig(f"need 7 pooling choices from {POOL_KINDS}, got {self.pools}")

    def spatial_sizes(self) -> list[int]:
        """Feature-map side after each conv layer (and its pooling)."""
        side, out = self.input_side, []
        for k, pool in zip(self.kernel_sizes, self.pools):
            side = side + 2 * (k // 2) - k + 1
            if pool != "none":
                side //= 2
            if side < 1:
                raise BadConfig(f"input side {self.input_side} collapses below 1 before conv7")
            out.append(side)
        return out


class Classifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        cfg.spatial_sizes()
        convs = []
        prev = cfg.in_channels
        for width, k in zip(cfg.channels, cfg.kernel_sizes):
            convs.append(nn.Conv2d(prev, width, k, padding=k // 2))
            prev = width
        self.convs = nn.ModuleList(convs)
        self.grid = nn.AdaptiveAvgPool2d(cfg.fc_grid)
        flat = prev * cfg.fc_grid * cfg.fc_grid
        self.fcs = nn.ModuleList(
            [nn.Linear(flat, cfg.fc_width), nn.Linear(cfg.fc_width, cfg.fc_width), nn.Linear(cfg.fc_width, cfg.fc_width)]
        )
        self.dropout = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.fc_width, NUM_CLASSES)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                # He init keeps activations from shrinking through ten ReLU layers
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.head.weight, std=1.0 / np.sqrt(cfg.fc_width))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """fc3 activations (before dropout)."""
        for conv, pool in zip(self.convs, self.cfg.pools):
            x = F.relu(conv(x))
            if pool == "avg":
                x = F.avg_pool2d(x, 2)
            elif pool == "max":
                x = F.max_pool2d(x, 2)
            elif pool == "l2":
                x = l2pool2d(x, 2)
        x = torch.flatten(self.grid(x), 1)
        for fc in self.fcs:
            x = F.relu(fc(x))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.features(x)))

    def loss(self, scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.cfg.head == "margin":
            return hinge_loss_torch(scores, labels, self.cfg.margin)
        return F.cross_entropy(scores, labels)


def build_classifier(cfg: ClassifierConfig) -> Classifier:
    """Fan-in scaled (He) init under the config seed."""
    with seeded(cfg.seed):
        return Classifier(cfg)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def stack_to_tensor(stack: SliceStack, side: int) -> torch.Tensor:
    if stack.channel_tags != PLANE_TAGS:
        raise WrongChannels(f"classifier expects axial/coronal/sagittal channels, got {stack.channel_tags}")
    if stack.height != side or stack.width != side:
        raise WrongSize(f"classifier expects {side}x{side}, got {stack.height}x{stack.width}")
    return torch.from_numpy(stack.chw())


def classifier_forward(model: Classifier, stack: SliceStack) -> torch.Tensor:
    """Scores ``(5,)`` for one plane-triplet stack; uses eval mode."""
    x = stack_to_tensor(stack, model.cfg.input_side)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            p = next(model.parameters())
            return model(x.unsqueeze(0).to(p.dtype))[0]
    finally:
        model.train(was_training)


def predict_class(model_or_scores, stack: Optional[SliceStack] = None) -> tuple[LesionClass, np.ndarray]:
    """Arg-max class; exact ties go to the lowest ordinal.

    Accepts either ``(model, stack)`` or a ready score vector.
    """
    if stack is not None:
        scores = classifier_forward(model_or_scores, stack).double().numpy()
    else:
        scores = np.asarray(model_or_scores.detach() if torch.is_tensor(model_or_scores) else model_or_scores, dtype=np.float64)
    return LesionClass(int(np.argmax(scores))), scores


def _augmented(stack: SliceStack, policy: AugmentPolicy, draw: int, side: int) -> np.ndarray:
    out = apply_policy(stack, policy, draw)
    px = out.pixels
    if px.shape[0] != side or px.shape[1] != side:
        px = resize_bilinear(px, side, side)
    return np.ascontiguousarray(np.transpose(px, (2, 0, 1)), dtype=np.float32)


def evaluate_classifier(model: Classifier, x: torch.Tensor, y: torch.Tensor, chunk: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) in eval mode over tensors ``x``, ``y``."""
    was_training = model.training
    model.eval()
    total, correct = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(y), chunk):
            scores = model(x[s : s + chunk])
            total += float(model.loss(scores, y[s : s + chunk])) * len(scores)
            correct += int((scores.argmax(dim=1) == y[s : s + chunk]).sum())
    model.train(was_training)
    return total / len(y), correct / len(y)


def _as_tensors(samples, side: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.stack([stack_to_tensor(s, side) for s, _ in samples]).to(dtype)
    ys = torch.tensor([int(LesionClass.parse(c)) for _, c in samples], dtype=torch.long)
    return xs, ys


def train_classifier(
    model: Classifier,
    samples: Sequence[tuple[SliceStack, LesionClass]],
    cfg: TrainConfig,
    test_samples: Optional[Sequence[tuple[SliceStack, LesionClass]]] = None,
    augment: Optional[AugmentPolicy] = None,
    history_path=None,
) -> tuple[Classifier, TrainHistory]:
    """Minibatch training; returns the model (trained in place) and its history.

    Evaluation uses ``test_samples`` when given, otherwise the training set.
    """
    if len(samples) == 0:
        raise EmptyDataset("classifier training needs at least one sample")
    side = model.cfg.input_side
    dtype = next(model.parameters()).dtype
    x, y = _as_tensors(samples, side, dtype)
    ex, ey = _as_tensors(test_samples, side, dtype) if test_samples else (x, y)
    opt = make_optimizer(model.parameters(), cfg)
    sched = make_scheduler(opt, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    batches = batch_indices(len(y), min(cfg.batch_size, len(y)), gen)
    history = open_history(history_path)
    test_loss, acc = 0.0, 0.0
    try:
        with seeded(cfg.seed + 1):
            model.train()
            for it in range(1, cfg.iterations + 1):
                idx = next(batches)
                if augment is not None:
                    xb = torch.from_numpy(
                        np.stack([_augmented(samples[i][0], augment, it * len(y) + i, side) for i in idx])
                    ).to(dtype)
                else:
                    xb = x[idx]
                loss = model.loss(model(xb), y[idx])
                value = check_finite(loss, it)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if sched is not None:
                    sched.step()
                if it == 1 or it % cfg.eval_every == 0 or it == cfg.iterations:
                    test_loss, acc = evaluate_classifier(model, ex, ey)
                history.append(it, value, test_loss, acc)
    finally:
        close_history(history)
    model.eval()
    return model, history


def fit_svm_head(model: Classifier, samples: Sequence[tuple[SliceStack, LesionClass]], c: float = 1.0) -> Classifier:
    """Replace the linear head with a Crammer-Singer linear SVM fit on frozen fc3 features."""
    from sklearn.svm import LinearSVC

    x, y = _as_tensors(samples, model.cfg.input_side, next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        feats = model.features(x).double().numpy()
    # fit on unit-variance features, then fold the scale into the head weights
    scale = feats.std(axis=0) + 1e-8
    svm = LinearSVC(C=c, multi_class="crammer_singer", random_state=model.cfg.seed, max_iter=20000)
    svm.fit(feats / scale, y.numpy())
    coef, icpt = svm.coef_, svm.intercept_
    if coef.shape[0] == 1:
        coef, icpt = np.concatenate([-coef, coef]), np.array([-icpt[0], icpt[0]])
    w = np.zeros((NUM_CLASSES, feats.shape[1]))
    # classes missing from the data keep a score that never wins
    b = np.full(NUM_CLASSES, -1e9)
    w[svm.classes_] = coef / scale
    b[svm.classes_] = icpt
    with torch.no_grad():
        model.head.weight.copy_(torch.from_numpy(w))
        model.head.bias.copy_(torch.from_numpy(b))
    return model

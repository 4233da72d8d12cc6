"""Single-file model checkpoints: format version, task, model config echo and
named parameter tensors, stored with ``torch.save``."""
from __future__ import annotations

from dataclasses import asdict
from typing import Any, Optional

import torch
from torch import nn

from ..classifier import ClassifierConfig, build_classifier
from ..detector import DetectorConfig, build_detector
from ..errors import CorruptHeader, IoFailure
from ..segmenter import SegmenterConfig, build_segmenter

FORMAT_VERSION = 1

_BUILDERS = {
    "classify": (ClassifierConfig, build_classifier),
    "detect": (DetectorConfig, build_detector),
    "segment": (SegmenterConfig, build_segmenter),
}


def save_checkpoint(path, task: str, model: nn.Module, run_config: Optional[dict[str, Any]] = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "task": task,
        "model_config": asdict(model.cfg),
        "run_config": dict(run_config or {}),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    try:
        torch.save(payload, path)
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[str, nn.Module, dict[str, Any]]:
    """Returns ``(task, model in eval mode, run config echo)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise IoFailure(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CorruptHeader(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise CorruptHeader(f"{path}: unsupported checkpoint format")
    task = payload["task"]
    cfg_cls, build = _BUILDERS[task]
    model = build(cfg_cls(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return task, model, payload.get("run_config", {})

"""Task orchestration behind the CLI: data loading, training, evaluation,
prediction files, ablation and synthetic data generation."""
from __future__ import annotations

import shutil
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..classifier import ClassifierConfig, build_classifier, predict_class, train_classifier
from ..detector import DetectorConfig, build_detector, detect, detection_mask, train_detector
from ..errors import ConfigError, EmptyDataset
from ..imaging_io import Modality, Plane
from ..labels import SUBREGIONS, LesionClass
from ..boxes import box_iou
from ..metrics import ConfusionCounts, MetricsReport, classification_report, dice, mask_confusion, summarize
from ..segmenter import (
    STAGES,
    InstanceMask,
    SegmenterConfig,
    anchor_shapes_from_boxes,
    build_segmenter,
    instance_dice,
    segment_instances,
    stage_predictions,
    train_segmenter,
)
from ..synthetic import generate_dataset, spec_from_mapping
from ..training import TrainHistory
from .ablation import AblationRow, parse_subset, run_ablation, table_subsets
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .data import AnnotatedSlice, annotated_slices, classifier_samples, load_subjects, select_split
from .records import DetectionRecord, InstanceRecord, write_detections, write_instances

CONFIG_ECHO = "config.resolved.txt"
CHECKPOINT = "model.pt"
HISTORY = "history.csv"
PLOT = "history.png"
REPORT = "report.csv"
ABLATION = "ablation.csv"

Echo = Callable[[str], None]


def _quiet(_: str) -> None:
    pass


def prepare_output(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(dump_config(cfg.resolved()), encoding="utf-8")
    return out


def _modalities(cfg: RunConfig) -> list[Modality]:
    mods = cfg.data.get("modalities", ["T1", "T1c", "T2", "FLAIR"])
    mods = mods if isinstance(mods, list) else [mods]
    return [Modality.parse(m) for m in mods]


def _split(cfg: RunConfig, key: str, default: str):
    subjects = load_subjects(cfg.manifest)
    return select_split(subjects, cfg.data.get(key, default))


def _slices(cfg: RunConfig, key: str, default: str) -> list[AnnotatedSlice]:
    subjects = _split(cfg, key, default)
    if not subjects:
        return []
    return annotated_slices(subjects, _modalities(cfg), Plane.parse(cfg.data.get("plane", "axial")))


def _classifier_data(cfg: RunConfig, key: str, default: str, side: int):
    subjects = _split(cfg, key, default)
    if not subjects:
        return []
    return classifier_samples(subjects, cfg.data.get("modality", "FLAIR"), side)


def build_model(cfg: RunConfig, train_slices: Optional[list[AnnotatedSlice]] = None):
    model_cfg = cfg.model
    try:
        if cfg.task == "classify":
            return build_classifier(ClassifierConfig(**model_cfg))
        channels = len(_modalities(cfg))
        if cfg.task == "detect":
            return build_detector(DetectorConfig(**{**model_cfg, "in_channels": channels}))
        seg_cfg = SegmenterConfig(**{**model_cfg, "in_channels": channels})
        if cfg.data.get("anchors", "kmeans") == "kmeans" and seg_cfg.anchor_shapes is None and train_slices:
            boxes = np.concatenate([s.boxes for s in train_slices])
            if len(boxes):
                seg_cfg = replace(seg_cfg, anchor_shapes=anchor_shapes_from_boxes(boxes, seg_cfg.anchor_k))
        return build_segmenter(seg_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad model block: {exc}") from exc


def plot_history(history: TrainHistory, path: Path) -> bool:
    """Loss and accuracy curves; returns False when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    it = [r.iteration for r in history.rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(it, [r.train_loss for r in history.rows], label="train loss")
    a.plot(it, [r.test_loss for r in history.rows], label="test loss")
    a.set_xlabel("iteration")
    a.legend()
    b.plot(it, [r.accuracy for r in history.rows], color="tab:green")
    b.set_xlabel("iteration")
    b.set_ylabel("accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return True


def train_run(cfg: RunConfig, echo: Echo = _quiet):
    out = prepare_output(cfg)
    tcfg = cfg.train
    hist_path = out / HISTORY
    if cfg.task == "classify":
        model = build_model(cfg)
        side = model.cfg.input_side
        train = _classifier_data(cfg, "train_split", "train", side)
        test = _classifier_data(cfg, "test_split", "test", side)
        if not train:
            raise EmptyDataset("training split is empty")
        model, history = train_classifier(model, train, tcfg, test or None, cfg.augment, hist_path)
    else:
        train = _slices(cfg, "train_split", "train")
        test = _slices(cfg, "test_split", "test")
        if not train:
            raise EmptyDataset("training split is empty")
        model = build_model(cfg, train)
        if cfg.task == "detect":
            model, history = train_detector(model, [s.detection_sample() for s in train], tcfg, [s.detection_sample() for s in test] or None, cfg.augment, hist_path)
        else:
            model, history = train_segmenter(model, [s.segmentation_sample() for s in train], tcfg, [s.segmentation_sample() for s in test] or None, hist_path)
    save_checkpoint(out / CHECKPOINT, cfg.task, model, cfg.resolved())
    if cfg.values.get("output.plot", False) and not plot_history(history, out / PLOT):
        echo("matplotlib not installed; skipped the history plot")
    final = history.final
    echo(f"trained {cfg.task} for {len(history)} iterations: train loss {final.train_loss:.4g}, eval accuracy {final.accuracy:.4g}")
    return model, history


def _load(cfg: RunConfig, checkpoint: Optional[Path]):
    path = Path(checkpoint) if checkpoint else cfg.out_dir / CHECKPOINT
    task, model, _ = load_checkpoint(path)
    if task != cfg.task:
        raise ConfigError(f"checkpoint {path} is a {task} model, config task is {cfg.task}")
    return model


def evaluate_run(cfg: RunConfig, checkpoint: Optional[Path] = None, echo: Echo = _quiet) -> MetricsReport:
    out = prepare_output(cfg)
    model = _load(cfg, checkpoint)
    split_key = ("eval_split", "test")
    if cfg.task == "classify":
        data = _classifier_data(cfg, *split_key, model.cfg.input_side)
        if not data:
            raise EmptyDataset("evaluation split is empty")
        pred = [predict_class(model, stack)[0] for stack, _ in data]
        report = classification_report(pred, [c for _, c in data], list(LesionClass))
    else:
        data = _slices(cfg, *split_key)
        if not data:
            raise EmptyDataset("evaluation split is empty")
        report = _evaluate_detect(cfg, model, data) if cfg.task == "detect" else _evaluate_segment(model, data)
    report.write(out / REPORT)
    echo(f"wrote {out / REPORT}")
    for row in report.rows():
        echo("  " + row[0] + ": " + ", ".join(f"{v:.4f}" for v in row[1:]))
    return report


def _evaluate_detect(cfg: RunConfig, model, data: list[AnnotatedSlice]) -> MetricsReport:
    top_k = int(cfg.data.get("top_k", 1))
    total = ConfusionCounts(0, 0, 0, 0)
    per, hits = [], 0
    for s in data:
        dets = detect(model, s.stack)
        pred = detection_mask(dets, s.stack.height, s.stack.width, top_k)
        total = total + mask_confusion(pred, s.union)
        per.append(dice(pred, s.union))
        hits += int(bool(dets) and len(s.boxes) > 0 and float(box_iou(dets[0].box[None], s.boxes).max()) >= 0.5)
    return summarize({"lesion": total}, {"mean_slice_dice": float(np.mean(per)), "top_hit_rate": hits / len(data)})


def _evaluate_segment(model, data: list[AnnotatedSlice]) -> MetricsReport:
    """Pixel metrics per subregion for every cascade stage plus instance Dice.

    Rows are keyed ``<subregion>`` for the final instances and
    ``box:<subregion>`` / ``mask:<subregion>`` for the earlier stages.
    """
    keys = [f"{stage}:{name}" if stage != "instance" else name for stage in STAGES for name in SUBREGIONS]
    counts = {k: ConfusionCounts(0, 0, 0, 0) for k in keys}
    inst_scores = []
    for s in data:
        shape = (s.stack.height, s.stack.width)
        preds = stage_predictions(model, s.stack)
        inst_scores.extend(instance_dice([InstanceMask(m, k, 1.0) for m, k in preds["instance"]], s.masks))
        for k, name in enumerate(SUBREGIONS):
            truth = np.zeros(shape, bool)
            for m, sub in zip(s.masks, s.subregions):
                if sub == k:
                    truth |= m
            for stage in STAGES:
                pred = np.zeros(shape, bool)
                for m, sub in preds[stage]:
                    if sub == k:
                        pred |= m
                key = name if stage == "instance" else f"{stage}:{name}"
                counts[key] = counts[key] + mask_confusion(pred, truth)
    mean = float(np.mean(inst_scores)) if inst_scores else 1.0
    return summarize(counts, {"mean_instance_dice": mean})


def predict_run(cfg: RunConfig, checkpoint: Optional[Path] = None, split: str = "test", echo: Echo = _quiet) -> Path:
    out = prepare_output(cfg)
    model = _load(cfg, checkpoint)
    if cfg.task == "classify":
        subjects = _split(cfg, "predict_split", split)
        data = classifier_samples(subjects, cfg.data.get("modality", "FLAIR"), model.cfg.input_side) if subjects else []
        path = out / "predictions.csv"
        lines = ["subject_id,label,predicted," + ",".join("score_" + c.name for c in LesionClass)]
        for subj, (stack, label) in zip(subjects, data):
            cls, scores = predict_class(model, stack)
            lines.append(",".join([subj.subject_id, label.name, cls.name] + [repr(float(v)) for v in scores]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif cfg.task == "detect":
        path = out / "detections.csv"
        recs = []
        for s in _slices(cfg, "predict_split", split):
            for d in detect(model, s.stack):
                recs.append(DetectionRecord(s.subject_id, s.slice_index, d.category, d.score, *(float(v) for v in d.box)))
        write_detections(path, recs)
    else:
        path = out / "instances.csv"
        recs = []
        for s in _slices(cfg, "predict_split", split):
            for i in segment_instances(model, s.stack):
                recs.append(InstanceRecord(s.subject_id, s.slice_index, i.subregion_name, i.score, tuple(float(v) for v in i.box.as_array()), i.mask))
        write_instances(path, recs)
    echo(f"wrote {path}")
    return path


def ablation_subsets(cfg: RunConfig) -> list:
    given = cfg.values.get("ablation.subsets")
    if given is None:
        return table_subsets(cfg.values.get("ablation.fourth", "FLAIR"))
    given = given if isinstance(given, list) else [given]
    return [parse_subset(str(s)) for s in given]


def ablate_run(cfg: RunConfig, echo: Echo = _quiet) -> list[AblationRow]:
    if cfg.task not in ("detect", "segment"):
        raise ConfigError("ablation needs task = detect or task = segment")
    out = prepare_output(cfg)
    train = _slices(cfg, "train_split", "train")
    test = _slices(cfg, "test_split", "test")
    if not train or not test:
        raise EmptyDataset("ablation needs non-empty train and test splits")

    def show(row: AblationRow) -> None:
        marks = " ".join("x" if on else "-" for on in row.indicators)
        echo(f"  {marks}  dice {row.dice:.4f}  ({'+'.join(m.value for m in row.subset)})")

    return run_ablation(
        cfg.task,
        train,
        test,
        ablation_subsets(cfg),
        cfg.model,
        cfg.train,
        fixed_arity=bool(cfg.values.get("ablation.fixed_arity", False)),
        top_k=int(cfg.data.get("top_k", 1)),
        out_path=out / ABLATION,
        progress=show,
    )


def gen_data_run(cfg: RunConfig, echo: Echo = _quiet) -> Path:
    syn = {k: v for k, v in ((k[len("synthetic.") :], v) for k, v in cfg.values.items() if k.startswith("synthetic."))}
    n = int(syn.pop("n_cases", 20))
    split = syn.pop("split", [0.8, 0.2])
    split = split if isinstance(split, list) else [split]
    try:
        spec = spec_from_mapping(syn)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic block: {exc}") from exc
    target = cfg.manifest
    manifest = generate_dataset(spec, n, split, target.parent)
    if manifest != target:
        shutil.move(manifest, target)
    echo(f"wrote {n} synthetic cases and {target}")
    return target

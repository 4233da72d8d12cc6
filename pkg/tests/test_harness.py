import os
import tempfile

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuropipe.classifier import ClassifierConfig, build_classifier
from neuropipe.errors import ConfigError, CorruptHeader, EmptySubset, IoFailure
from neuropipe.harness.ablation import (
    AblationRow,
    INDICATOR_COLUMNS,
    parse_subset,
    read_ablation_table,
    run_ablation,
    subset_name,
    table_subsets,
    write_ablation_table,
)
from neuropipe.harness.checkpoint import load_checkpoint, save_checkpoint
from neuropipe.harness.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from neuropipe.harness.config import (
    OUT_ENV,
    RunConfig,
    apply_overrides,
    dump_config,
    format_value,
    load_config,
    parse_config_text,
    parse_value,
)
from neuropipe.harness.data import annotated_slice, load_subjects, select_split
from neuropipe.harness.records import (
    DetectionRecord,
    InstanceRecord,
    read_detections,
    read_instances,
    rle_decode,
    rle_encode,
    write_detections,
    write_instances,
)
from neuropipe.imaging_io import Modality
from neuropipe.metrics import read_report
from neuropipe.training import TrainConfig, TrainHistory, make_optimizer, make_scheduler, open_history, close_history

CLASSIFY_CFG = """\
task = classify
data.manifest = data/manifest.csv  # relative to this file
synthetic.n_cases = 10
synthetic.split = 0.5, 0.5
synthetic.shape = 24, 24, 24
model.input_side = 32
model.channels = 2, 2, 2, 2, 2, 2, 2
model.fc_width = 8
model.fc_grid = 1
train.iterations = 3
train.batch_size = 4
"""


def write_cfg(tmp_path, text=CLASSIFY_CFG, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---- config ------------------------------------------------------------


def test_parse_value_types():
    assert parse_value("true") is True
    assert parse_value("None") is None
    assert parse_value("12") == 12 and isinstance(parse_value("12"), int)
    assert parse_value("1e-3") == 1e-3
    assert parse_value("FLAIR") == "FLAIR"
    assert parse_value("1, 2, 3") == [1, 2, 3]
    assert parse_value("FLAIR,") == ["FLAIR"]


@given(st.lists(st.one_of(st.integers(-1000, 1000), st.floats(allow_nan=False, allow_infinity=False), st.booleans()), min_size=1, max_size=4))
def test_format_parse_round_trip(items):
    value = items if len(items) > 1 else items[0]
    back = parse_value(format_value(value))
    assert back == value
    if len(items) == 1:
        assert parse_value(format_value(items)) == items


def test_config_text_rules():
    vals = parse_config_text("# header\n\ntask = detect\ntrain.lr = 0.01 # inline\n")
    assert vals == {"task": "detect", "train.lr": 0.01}
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("a.b = 1\na.b = 2")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just words")


def test_overrides_and_dump_round_trip():
    vals = apply_overrides({"task": "classify", "train.lr": 0.1}, ["train.lr=0.5", "model.channels=1,2"])
    assert vals["train.lr"] == 0.5 and vals["model.channels"] == [1, 2]
    assert parse_config_text(dump_config(vals)) == vals
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_run_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="task"):
        RunConfig("cluster", {})
    with pytest.raises(ConfigError, match="unknown config key"):
        RunConfig("classify", {"bogus.key": 1})
    with pytest.raises(ConfigError, match="iterations"):
        RunConfig("classify", {"train.iterations": 0})
    with pytest.raises(ConfigError, match="unknown train keys"):
        RunConfig("classify", {"train.lrate": 0.1}).train
    cfg = RunConfig("classify", {"augment.enabled": True, "augment.flip_h_prob": 0.0}, tmp_path)
    assert cfg.augment.flip_h_prob == 0.0
    assert RunConfig("classify", {}).augment is None


def test_paths_resolve_against_config_dir(tmp_path, monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)
    cfg = load_config(write_cfg(tmp_path))
    assert cfg.manifest == (tmp_path / "data" / "manifest.csv").resolve()
    assert cfg.out_dir == (tmp_path / "runs" / "classify").resolve()
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "elsewhere"))
    assert cfg.out_dir == (tmp_path / "elsewhere").resolve()
    assert cfg.resolved()["output.dir"] == str((tmp_path / "elsewhere").resolve())


def test_missing_config_exits_1_naming_path(tmp_path, capsys):
    missing = tmp_path / "absent.cfg"
    assert main(["train", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_bad_override_exits_1(tmp_path):
    assert main(["train", str(write_cfg(tmp_path)), "--set", "train.iterations=0"]) == EXIT_CONFIG


def test_missing_checkpoint_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "out"))
    assert main(["evaluate", str(write_cfg(tmp_path)), "--checkpoint", str(tmp_path / "none.pt")]) == EXIT_RUNTIME


def test_gradcheck_exits_0(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS gradient suite" in out


def test_gradcheck_failure_maps_to_3(monkeypatch):
    import neuropipe.harness.cli as cli

    monkeypatch.setattr(cli, "main_report", lambda seed, echo: False)
    assert cli.main(["gradcheck"]) == EXIT_CHECK


def test_gen_train_evaluate_predict_pipeline(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv(OUT_ENV, str(out))
    cfg = str(write_cfg(tmp_path))
    assert main(["gen-data", cfg]) == EXIT_OK
    assert (tmp_path / "data" / "manifest.csv").exists()
    assert main(["train", cfg]) == EXIT_OK
    for name in ("model.pt", "history.csv", "config.resolved.txt"):
        assert (out / name).exists()
    assert len(TrainHistory.read(out / "history.csv")) == 3
    echo = parse_config_text((out / "config.resolved.txt").read_text())
    assert echo["train.iterations"] == 3 and echo["output.dir"] == str(out.resolve())
    assert main(["evaluate", cfg]) == EXIT_OK
    report = read_report(out / "report.csv")
    assert list(report.per_key) == ["Healthy", "TumorHGG", "TumorLGG", "Alzheimer", "MultipleSclerosis"]
    assert 0.0 <= report.extra["overall_accuracy"] <= 1.0
    assert main(["predict", cfg, "--split", "all"]) == EXIT_OK
    lines = (out / "predictions.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("subject_id,label,predicted")


def test_evaluate_rejects_checkpoint_of_other_task(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "out"))
    cfg = str(write_cfg(tmp_path))
    assert main(["gen-data", cfg]) == EXIT_OK
    assert main(["train", cfg]) == EXIT_OK
    other = write_cfg(tmp_path, CLASSIFY_CFG.replace("task = classify", "task = detect").replace("model.", "#model."), "det.cfg")
    assert main(["evaluate", str(other), "--checkpoint", str(tmp_path / "out" / "model.pt")]) == EXIT_CONFIG


# ---- dataset access ----------------------------------------------------


def test_annotated_slice_from_generated_data(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "out"))
    text = CLASSIFY_CFG.replace("synthetic.shape = 24, 24, 24", "synthetic.shape = 24, 24, 24\nsynthetic.classes = TumorHGG,")
    assert main(["gen-data", str(write_cfg(tmp_path, text))]) == EXIT_OK
    subjects = load_subjects(tmp_path / "data" / "manifest.csv")
    assert len(select_split(subjects, "train")) == 5 and len(select_split(subjects, "all")) == 10
    s = annotated_slice(subjects[0], ["T1", "FLAIR"])
    assert s.stack.channels == 2 and s.masks
    assert s.union.sum() == sum(int(m.sum()) for m in s.masks)
    assert all(0 <= k < 4 for k in s.subregions)
    assert s.detection_sample().boxes.shape == (len(s.masks), 4)
    with pytest.raises(ConfigError):
        annotated_slice(subjects[0], ["DWI"])


# ---- records -----------------------------------------------------------


def test_rle_conventions():
    assert rle_encode(np.zeros((2, 3), bool)) == "2 3 6"
    assert rle_encode(np.ones((2, 3), bool)) == "2 3 0 6"
    m = np.array([[0, 1, 1], [1, 0, 0]], bool)
    assert rle_encode(m) == "2 3 1 3 2"
    with pytest.raises(CorruptHeader):
        rle_decode("2 3 1 1")


@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_rle_round_trip(mask):
    back = rle_decode(rle_encode(mask))
    assert back.shape == mask.shape and np.array_equal(back, mask)


def test_detection_records_round_trip(tmp_path):
    recs = [DetectionRecord("s1", 4, 1, 0.1 + 0.2, 1.5, 2.25, 10.0, 11.125), DetectionRecord("s2", 0, 1, 1.0, 0.0, 0.0, 3.0, 4.0)]
    write_detections(tmp_path / "d.csv", recs)
    assert read_detections(tmp_path / "d.csv") == recs


def test_instance_records_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    recs = [InstanceRecord("s1", 3, "edema", 0.75, (1.0, 2.0, 5.0, 7.0), rng.random((8, 9)) > 0.5)]
    write_instances(tmp_path / "i.csv", recs)
    assert read_instances(tmp_path / "i.csv") == recs


def test_records_bad_header(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n")
    with pytest.raises(CorruptHeader):
        read_detections(tmp_path / "x.csv")
    with pytest.raises(IoFailure):
        read_instances(tmp_path / "missing.csv")


# ---- ablation table ----------------------------------------------------


def test_nine_subset_table_structure(tmp_path):
    subsets = table_subsets()
    assert len(subsets) == 9
    assert [subset_name(s) for s in subsets] == [
        "T1",
        "T1c",
        "T2",
        "FLAIR",
        "T1c+T2+FLAIR",
        "T1+T1c+FLAIR",
        "T1+T2+FLAIR",
        "T1+T1c+T2",
        "T1+T1c+T2+FLAIR",
    ]
    assert subsets[3] == (Modality.FLAIR,) and table_subsets("DWI")[3] == (Modality.DWI,)
    rows = [AblationRow(s, 0.5, 0.25) for s in subsets]
    write_ablation_table(tmp_path / "a.csv", rows)
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].split(",")[:4] == list(INDICATOR_COLUMNS)
    assert len(lines) == 10
    assert lines[5].startswith("-,x,x,x,")
    assert read_ablation_table(tmp_path / "a.csv") == rows


def test_parse_subset():
    assert parse_subset("FLAIR+T1") == (Modality.T1, Modality.FLAIR)
    with pytest.raises(EmptySubset):
        parse_subset(" + ")


def _tiny_slices(n, seed):
    from neuropipe.harness.data import AnnotatedSlice
    from neuropipe.labels import LesionClass
    from neuropipe.synthetic import SyntheticSpec, case_slice, generate_case

    spec = SyntheticSpec(shape=(32, 32, 32), classes=(LesionClass.TumorHGG,), seed=seed)
    return [AnnotatedSlice(f"c{i}", 0, s.stack, s.masks, s.subregions) for i, s in enumerate(case_slice(generate_case(spec, i)) for i in range(n))]


TINY_DET = dict(backbone_channels=(2, 2), backbone_pools=(True, False), roi_fc_width=4, global_channels=2, global_grid=1, fusion_width=4, spp_size=(2, 2))


def test_single_subset_gives_one_row(tmp_path):
    sl = _tiny_slices(3, 0)
    rows = run_ablation("detect", sl[:2], sl[2:], ["T1+T1c+T2+FLAIR"], TINY_DET, TrainConfig(iterations=2, batch_size=2), out_path=tmp_path / "a.csv")
    assert len(rows) == 1 and rows[0].indicators == (True, True, True, True)
    assert 0.0 <= rows[0].dice <= 1.0
    assert len(read_ablation_table(tmp_path / "a.csv")) == 1


def test_ablation_rows_are_independent_of_order():
    sl = _tiny_slices(3, 1)
    cfg = TrainConfig(iterations=2, batch_size=2)
    a = run_ablation("detect", sl[:2], sl[2:], ["T1", "FLAIR"], TINY_DET, cfg)
    b = run_ablation("detect", sl[:2], sl[2:], ["FLAIR", "T1"], TINY_DET, cfg)
    assert a == b[::-1]


def test_ablation_input_errors():
    sl = _tiny_slices(2, 0)
    with pytest.raises(EmptySubset):
        run_ablation("detect", sl, sl, [])
    with pytest.raises(ValueError):
        run_ablation("classify", sl, sl, ["T1"])


# ---- checkpoints and history ------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = build_classifier(ClassifierConfig(input_side=32, channels=(2,) * 7, fc_width=8, fc_grid=1, seed=4))
    save_checkpoint(tmp_path / "m.pt", "classify", model, {"train.lr": 0.1})
    task, back, run = load_checkpoint(tmp_path / "m.pt")
    assert task == "classify" and run == {"train.lr": 0.1} and not back.training
    for (k, v), (k2, v2) in zip(model.state_dict().items(), back.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CorruptHeader):
        load_checkpoint(tmp_path / "junk.pt")


def test_history_is_flushed_row_by_row(tmp_path):
    path = tmp_path / "h.csv"
    h = open_history(path)
    for i in range(3):
        h.append(i + 1, 1.0 / (i + 1), 0.5, 0.1 * i)
        # readable before the run ends, as after an interruption
        assert len(TrainHistory.read(path)) == i + 1
    close_history(h)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,train_loss,test_loss,accuracy" and len(lines) == 4
    assert TrainHistory.read(path).rows == h.rows


@settings(max_examples=25)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=10))
def test_history_parse_back_exact(values):
    h = TrainHistory()
    for i, v in enumerate(values):
        h.append(i + 1, v, v / 3, 0.5)
    with tempfile.TemporaryDirectory() as d:
        h.write(os.path.join(d, "h.csv"))
        assert TrainHistory.read(os.path.join(d, "h.csv")).rows == h.rows


def test_cosine_schedule_anneals_to_zero():
    p = torch.nn.Parameter(torch.zeros(1))
    cfg = TrainConfig(iterations=10, lr=0.1, schedule="cosine")
    opt = make_optimizer([p], cfg)
    sched = make_scheduler(opt, cfg)
    lrs = []
    for _ in range(10):
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
    assert lrs[0] == pytest.approx(0.1) and all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert opt.param_groups[0]["lr"] == pytest.approx(0.0, abs=1e-12)
    assert make_scheduler(opt, TrainConfig()) is None

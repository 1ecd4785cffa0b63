import csv
import json

import numpy as np
import pytest
from PIL import Image

from canvasweave.canvas import write_png
from canvasweave.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    EXIT_PARTIAL,
    main,
    render_grid,
)
from canvasweave.dataset import ManifestEntry, SplitManifest
from canvasweave.model import load_checkpoint
from canvasweave.presets import DESK_CLASSES

TINY_FLAGS = ["--stage-filters", "2,2,3,3,4", "--conv-filters", "4", "--fc-widths", "16,8", "--embedding-dim", "6"]
FAST_TRAIN = ["--M", "2", "--batch-size", "8", "--batches-per-epoch", "2", "--val-pairs", "16", "--lr0", "0.01"]


def run(root, *argv):
    return main(["--data-root", str(root), *argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cw")
    assert run(root, "--seed", "3", "synth", "--out", "data", "--size-cm", "2", "2", "--splits", "train,validation,test") == EXIT_OK
    assert run(root, "preprocess", "--manifest", "data/manifest.csv", "--out", "prep") == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    code = run(workspace, "--seed", "3", "train", "--manifest", "prep/manifest.csv", "--out", "run3", "--restarts", "3", "--max-epochs", "3", *TINY_FLAGS, *FAST_TRAIN)
    assert code == EXIT_OK
    return workspace / "run3"


# --- synth and preprocess ---------------------------------------------------------------


def test_synth_counts(workspace):
    pngs = sorted((workspace / "data" / "images").glob("*.png"))
    assert len(pngs) == 18
    assert len(rows(workspace / "data" / "manifest.csv")) == 18


def test_synth_records_densities(workspace):
    by_name = {fc.name: fc.spec for fc in DESK_CLASSES}
    for r in rows(workspace / "data" / "manifest.csv"):
        spec = by_name[r["class_name"]]
        assert float(r["warp_density"]) == spec.warp_density
        assert float(r["weft_density"]) == spec.weft_density
        assert float(r["tension_ratio"]) == spec.tension_ratio


def test_synth_rerun_byte_identical(workspace, tmp_path):
    assert run(tmp_path, "--seed", "3", "synth", "--out", "again", "--size-cm", "2", "2", "--splits", "train,validation,test") == EXIT_OK
    for png in (workspace / "data" / "images").glob("*.png"):
        assert png.read_bytes() == (tmp_path / "again" / "images" / png.name).read_bytes()


def test_synth_seed_changes_images(tmp_path):
    run(tmp_path, "--seed", "1", "synth", "--out", "a", "--size-cm", "2", "2", "--splits", "test", "--preset", "hard")
    run(tmp_path, "--seed", "2", "synth", "--out", "b", "--size-cm", "2", "2", "--splits", "test", "--preset", "hard")
    assert (tmp_path / "a/images/slack_0.png").read_bytes() != (tmp_path / "b/images/slack_0.png").read_bytes()


def test_synth_custom_classes(tmp_path):
    (tmp_path / "classes.json").write_text(json.dumps([{"name": "x", "spec": {"warp_density": 9.0, "weft_density": 11.0}}]))
    assert run(tmp_path, "synth", "--out", "d", "--classes", "classes.json", "--splits", "train,test", "--size-cm", "2", "2") == EXIT_OK
    assert [r["canvas_id"] for r in rows(tmp_path / "d/manifest.csv")] == ["x_0", "x_1"]


def test_synth_invalid_class_is_config_error(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps([{"name": "x", "spec": {"warp_density": 40.0, "weft_density": 11.0}}]))
    assert run(tmp_path, "synth", "--out", "d", "--classes", "bad.json") == EXIT_CONFIG


def test_preprocess_manifest(workspace):
    prep = rows(workspace / "prep" / "manifest.csv")
    assert len(prep) == 18
    assert {r["preprocess_hash"] for r in prep} and len({r["preprocess_hash"] for r in prep}) == 1
    assert all(float(r["resolution"]) == 200.0 for r in prep)
    assert len({r["path"] for r in prep}) == 18


def test_preprocess_cache_reused(workspace):
    before = {p.name: p.stat().st_mtime_ns for p in (workspace / "prep" / "images").glob("*.png")}
    assert run(workspace, "preprocess", "--manifest", "data/manifest.csv", "--out", "prep") == EXIT_OK
    after = {p.name: p.stat().st_mtime_ns for p in (workspace / "prep" / "images").glob("*.png")}
    assert before == after


def test_missing_manifest_is_data_error(tmp_path):
    assert run(tmp_path, "preprocess", "--manifest", "nope.csv", "--out", "o") == EXIT_DATA


def test_bad_flag_is_config_error(tmp_path):
    assert run(tmp_path, "train", "--manifest", "m.csv", "--out", "o", "--stage-filters", "a,b") == EXIT_CONFIG


def test_env_data_root(workspace, monkeypatch):
    monkeypatch.setenv("CANVASWEAVE_DATA_ROOT", str(workspace))
    from canvasweave.cli import build_parser

    assert build_parser().parse_args(["synth", "--out", "x"]).data_root == str(workspace)


# --- train -------------------------------------------------------------------------------


def test_train_single_restart(workspace):
    code = run(workspace, "train", "--manifest", "prep/manifest.csv", "--out", "run1", "--restarts", "1", "--max-epochs", "2", *TINY_FLAGS, *FAST_TRAIN)
    assert code == EXIT_OK
    out = workspace / "run1"
    assert sorted(p.name for p in out.glob("restart_*")) == ["restart_00"]
    assert len(list(out.glob("restart_*/model.pt"))) == 1
    assert len(list(out.glob("restart_*/report.csv"))) == 1
    assert (out / "best").resolve() == (out / "restart_00").resolve()


def test_best_points_at_min_validation(trained):
    summaries = {p.parent.name: json.loads(p.read_text()) for p in trained.glob("restart_*/summary.json")}
    assert len(summaries) == 3
    best = min(summaries, key=lambda k: summaries[k]["best_val_loss"])
    assert (trained / "best").resolve().name == best
    assert json.loads((trained / "best.json").read_text())["path"] == best


def test_report_rows_equal_epochs(trained):
    for rdir in trained.glob("restart_*"):
        summary = json.loads((rdir / "summary.json").read_text())
        assert len(rows(rdir / "report.csv")) == summary["epochs_run"] == 3


def test_checkpoint_metadata(trained):
    m = load_checkpoint(trained / "best" / "model.pt")
    assert m.preprocess_hash is not None
    assert m.metadata["preprocess_config"]["target_resolution"] == 200.0
    assert "seed" in m.metadata and "epoch" in m.metadata


def test_train_zero_restarts_rejected(workspace):
    assert run(workspace, "train", "--manifest", "prep/manifest.csv", "--out", "r0", "--restarts", "0") == EXIT_CONFIG


def test_train_without_validation_split(tmp_path):
    run(tmp_path, "synth", "--out", "d", "--preset", "hard", "--splits", "train,train", "--size-cm", "2", "2")
    assert run(tmp_path, "train", "--manifest", "d/manifest.csv", "--out", "r", "--restarts", "1", *TINY_FLAGS) == EXIT_DATA


def test_train_reproduce(trained, workspace):
    assert run(workspace, "reproduce", "run3") == EXIT_OK


# --- compare and matrix -------------------------------------------------------------------


def test_compare_self_is_match(trained, workspace, capsys):
    assert run(workspace, "compare", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "mpret_2", "mpret_2", "--N", "100") == EXIT_OK
    rec = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rec["verdict"] == "match"
    assert rec["s"] < rec["u"]


def test_compare_warns_when_n_below_k(trained, workspace, caplog):
    run(workspace, "compare", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "mpret_2", "fine_2", "--N", "20")
    assert "below the bin count" in caplog.text


def test_compare_unknown_canvas(trained, workspace):
    assert run(workspace, "compare", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "mpret_2", "ghost") == EXIT_DATA


def test_compare_bad_checkpoint(workspace, tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"junk")
    assert run(workspace, "compare", "--manifest", "prep/manifest.csv", "--checkpoint", str(tmp_path / "junk.pt"), "mpret_2", "fine_2") == EXIT_DATA


TWELVE = ",".join(f"{fc.name}_{k}" for fc in DESK_CLASSES for k in (0, 2))


def test_matrix_twelve_canvases(trained, workspace):
    code = run(workspace, "matrix", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "--out", "m12", "--ids", TWELVE, "--N", "60", "--cell-px", "10")
    assert code == EXIT_OK
    r = rows(workspace / "m12" / "matrix.csv")
    off = [x for x in r if x["canvas_i"] != x["canvas_j"]]
    assert len(off) == 66 and len(r) == 78
    assert all(x["status"] == "ok" for x in r)
    assert all(0 <= float(x["s"]) <= 0.03 for x in r)
    with Image.open(workspace / "m12" / "matrix.png") as im:
        assert im.size == (120, 120)
        assert im.mode == "L"
    rec = json.loads((workspace / "m12" / "run.json").read_text())
    assert rec["configs"]["similarity"]["N"] == 60
    assert rec["canvas_ids"] == TWELVE.split(",")


def test_matrix_rerun_identical_csv(trained, workspace):
    args = ["matrix", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "--split", "test", "--N", "60"]
    assert run(workspace, "--seed", "5", *args, "--out", "ma") == EXIT_OK
    assert run(workspace, "--seed", "5", *args, "--out", "mb") == EXIT_OK
    assert (workspace / "ma/matrix.csv").read_bytes() == (workspace / "mb/matrix.csv").read_bytes()
    assert (workspace / "ma/matrix.png").read_bytes() == (workspace / "mb/matrix.png").read_bytes()
    assert run(workspace, "reproduce", "ma") == EXIT_OK


def test_matrix_partial_failure(trained, workspace):
    # 0.4 cm across: smaller than the 0.5 cm normalization window.
    write_png(workspace / "tiny.png", np.random.default_rng(0).random((80, 80)))
    m = SplitManifest.read(workspace / "prep" / "manifest.csv")
    entries = [e for e in m.entries if e.split == "test"][:2] + [ManifestEntry(str(workspace / "tiny.png"), "tiny", 0, "test", 200.0)]
    SplitManifest(entries, workspace / "prep").write(workspace / "prep" / "partial.csv")
    code = run(workspace, "matrix", "--manifest", "prep/partial.csv", "--checkpoint", "run3", "--out", "mp", "--N", "30")
    assert code == EXIT_PARTIAL
    r = rows(workspace / "mp" / "matrix.csv")
    assert len(r) == 6
    failed = [(x["canvas_i"], x["canvas_j"]) for x in r if x["status"] == "failed"]
    assert len(failed) == 3 and all("tiny" in pair for pair in failed)
    assert json.loads((workspace / "mp" / "run.json").read_text())["failures"]


def test_matrix_needs_two(trained, workspace):
    assert run(workspace, "matrix", "--manifest", "prep/manifest.csv", "--checkpoint", "run3", "--out", "m1", "--ids", "mpret_2") == EXIT_CONFIG


def test_render_grid():
    v = np.array([[0.0, 0.03], [0.03, np.nan]])
    g = render_grid(v, 0.03, 4)
    assert g.shape == (8, 8)
    assert np.all(g[:4, :4] == 0) and np.all(g[:4, 4:] == 1)
    cell = g[4:, 4:]
    assert set(np.unique(cell)) == {0.0, 1.0} and cell[0, 0] != cell[0, 1]


def test_reproduce_detects_change(workspace):
    assert run(workspace, "--seed", "3", "synth", "--out", "s", "--preset", "hard", "--splits", "test", "--size-cm", "2", "2") == EXIT_OK
    assert run(workspace, "reproduce", "s") == EXIT_OK
    (workspace / "s" / "manifest.csv").write_text("tampered\n")
    assert run(workspace, "reproduce", "s") == 6

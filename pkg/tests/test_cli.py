import json

import numpy as np
import pytest
from fakes import make_fake_ph2
from oracle import build_oracle_unet
from PIL import Image

from dsnet.checkpoint import save_checkpoint
from dsnet.cli import (OverlaySpec, RunConfig, UsageError, count_colours, main,
                       parse_class_table_text, render_overlay)
from dsnet.data import load_manifest, read_mask, write_mask
from dsnet.losses import get_loss, iou_loss
from dsnet.metrics import RocCurve, confusion, dice, iou_hard, parse_class_table
from dsnet.synthetic import write_fixture


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_fixture(root / "data", "fix", ["mel", "sk", "nev", "nev"], 96, 128, noise=0,
                  image_format="png")
    write_fixture(root / "data", "other", ["mel", "nev"], 96, 128, seed=9, noise=0,
                  image_format="png")
    save_checkpoint(build_oracle_unet(), root / "oracle.ckpt", {"loss": "combined"})
    return root


def run(*argv):
    return main([str(a) for a in argv])


# --- prepare -----------------------------------------------------------------

def test_prepare_ph2_tree(tmp_path, capsys):
    make_fake_ph2(tmp_path / "raw", 40, 160)
    assert run("prepare", tmp_path / "raw", "--out", tmp_path / "data") == 0
    assert "ph2: 200 images" in capsys.readouterr().out
    m = load_manifest(tmp_path / "data", "ph2")
    assert m.class_proportions() == pytest.approx({"mel": 0.2, "sk": 0.0, "nev": 0.8})
    assert run("prepare", tmp_path / "data", "--out", tmp_path / "unused") == 0
    assert "ph2: 200 images (normalized layout)" in capsys.readouterr().out


def test_prepare_six_image_fixture(tmp_path, capsys):
    write_fixture(tmp_path, "six", ["mel", "sk", "nev"] * 2, 32, 32)
    assert run("prepare", tmp_path, "--out", tmp_path / "x") == 0
    assert "six: 6 images" in capsys.readouterr().out


def test_prepare_unrecognised_layout(tmp_path, capsys):
    (tmp_path / "junk").mkdir()
    assert run("prepare", tmp_path / "junk", "--out", tmp_path / "x") == 2
    assert "unrecognised" in capsys.readouterr().err


# --- configuration --------------------------------------------------------------

def test_usage_errors(workspace, capsys):
    assert run("train", "--network", "resnet", "--data-root", workspace / "data") == 1
    assert "unknown network" in capsys.readouterr().err
    assert run("train", "--loss", "dice") == 1
    assert run("train", "--split", "fix", "--out", workspace / "t") == 1
    assert run("frobnicate") == 1
    assert run("train", "--epochs", "many") == 1


def test_loss_choice_dispatch():
    cfg = RunConfig("train", loss="iou", training={"plateau_patience": 3})
    tcfg = cfg.training_config()
    assert tcfg.loss == "iou" and get_loss(tcfg.loss) is iou_loss
    assert tcfg.plateau_patience == 3
    with pytest.raises(UsageError):
        RunConfig("train", training={"momentum": 0.9})


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "run.yaml"
    cfg_path.write_text("network: unet\nepochs: 7\nbatch-size: 2\n")
    cfg = RunConfig.from_sources("train", {"epochs": 3, "seed": None}, cfg_path)
    assert (cfg.network, cfg.epochs, cfg.batch_size, cfg.seed) == ("unet", 3, 2, 0)
    (tmp_path / "run.json").write_text(json.dumps({"loss": "cross_entropy"}))
    assert RunConfig.from_sources("train", {}, tmp_path / "run.json").loss == "cross_entropy"
    (tmp_path / "bad.yaml").write_text("colour: blue\n")
    with pytest.raises(UsageError, match="colour"):
        RunConfig.from_sources("train", {}, tmp_path / "bad.yaml")


# --- train ---------------------------------------------------------------------

def _train_unet(workspace, out, *extra):
    cfg = workspace / "small.yaml"
    cfg.write_text("model_options:\n  base_width: 4\nepochs: 5\n")
    return run("train", "--config", cfg, "--network", "unet", "--data-root", workspace / "data",
               "--split", "fix", "--val-split", "other", "--height", 96, "--width", 128,
               "--epochs", 2, "--batch-size", 2, "--out", out, *extra)


def test_train_writes_artifacts_and_is_deterministic(workspace, tmp_path):
    assert _train_unet(workspace, tmp_path / "a") == 0
    assert _train_unet(workspace, tmp_path / "b") == 0
    for name in ("best.ckpt", "history.json", "loss_curve.png", "run.json"):
        assert (tmp_path / "a" / name).exists()
    history = json.loads((tmp_path / "a" / "history.json").read_text())["history"]
    assert len(history) == 2     # the flag beats the config file
    assert history == json.loads((tmp_path / "b" / "history.json").read_text())["history"]
    run_info = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run_info["network"] == "unet" and run_info["config"]["model_options"] == {"base_width": 4}


def test_train_missing_split_is_a_data_error(workspace, tmp_path):
    assert run("train", "--data-root", workspace / "data", "--split", "nope",
               "--out", tmp_path) == 2


def test_train_rejects_non_dyadic_size(workspace, tmp_path):
    assert run("train", "--data-root", workspace / "data", "--split", "fix",
               "--height", 100, "--width", 128, "--out", tmp_path) == 1


# --- evaluate --------------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_eval(workspace):
    out = workspace / "eval_oracle"
    assert run("evaluate", "--checkpoint", workspace / "oracle.ckpt", "--data-root",
               workspace / "data", "--split", "fix", "--out", out) == 0
    return out


def test_oracle_evaluation_tables(oracle_eval):
    csv_table = parse_class_table((oracle_eval / "class_table.csv").read_text())
    text_table = parse_class_table_text((oracle_eval / "class_table.txt").read_text())
    for table in (csv_table, text_table):
        assert set(table) == {"nev", "mel", "sk", "overall"}
        for g in table:
            assert all(table[g][m] == 1.0 for m in ("mIoU", "mSn", "mSp", "mDice", "AUC"))
    text = (oracle_eval / "class_table.txt").read_text()
    assert "published DSNet reference" in text and "0.775" in text
    lines = (oracle_eval / "per_image.csv").read_text().splitlines()
    assert lines[0].startswith("id,class,iou") and len(lines) == 5


def test_evaluation_report_round_trip(oracle_eval):
    from dsnet.metrics import MetricsReport
    summary = json.loads((oracle_eval / "report.json").read_text())
    report = MetricsReport.from_dict(summary["report"])
    table = parse_class_table((oracle_eval / "class_table.csv").read_text())
    for g, stats in report.groups.items():
        assert table[g]["mIoU"] == pytest.approx(stats.miou, abs=5e-7)
    assert summary["network"] == "unet" and summary["n_images"] == 4
    curve = RocCurve.from_text((oracle_eval / "roc.txt").read_text())
    assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
    assert (oracle_eval / "roc.png").exists()


def test_checkpoint_network_mismatch(workspace, tmp_path, capsys):
    assert run("evaluate", "--checkpoint", workspace / "oracle.ckpt", "--network", "dsnet",
               "--data-root", workspace / "data", "--split", "fix", "--out", tmp_path) == 1
    assert "holds a unet network" in capsys.readouterr().err
    assert run("evaluate", "--checkpoint", tmp_path / "missing.ckpt", "--data-root",
               workspace / "data", "--split", "fix", "--out", tmp_path) == 2


# --- predict ---------------------------------------------------------------------

def test_predict_overlays_reconcile(workspace, tmp_path, capsys):
    # shifted ground truth so that all three colours appear
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    images = sorted((workspace / "data" / "fix" / "images").iterdir())
    for p in images:
        mask = read_mask(workspace / "data" / "fix" / "masks" / f"{p.stem}_segmentation.png")
        write_mask(np.roll(mask, 6, axis=1), gt_dir / f"{p.stem}_segmentation.png")
    out = tmp_path / "pred"
    assert run("predict", "--checkpoint", workspace / "oracle.ckpt", "--out", out,
               "--gt-dir", gt_dir, *images) == 0
    assert "mean inference" in capsys.readouterr().out
    spec = OverlaySpec()
    for p in images:
        overlay = np.array(Image.open(out / f"{p.stem}_overlay.png").convert("RGB"))
        legend = json.loads((out / f"{p.stem}_overlay.json").read_text())
        pred = read_mask(out / f"{p.stem}_mask.png")
        counts = confusion(pred, read_mask(gt_dir / f"{p.stem}_segmentation.png"))
        tally = count_colours(overlay, spec)
        assert tally == {"tp": counts.tp, "fn": counts.fn, "fp": counts.fp}
        assert min(tally.values()) > 0
        assert (legend["tp"], legend["fp"], legend["fn"], legend["tn"]) == \
            (counts.tp, counts.fp, counts.fn, counts.tn)
        assert legend["annotations"] == {"top-left": f"Dice {dice(counts):.3f}",
                                         "top-right": f"IoU {iou_hard(counts):.3f}"}
        assert set(np.unique(np.array(Image.open(out / f"{p.stem}_mask.png")))) <= {0, 255}
        probs = np.load(out / f"{p.stem}_prob.npy")
        assert probs.shape == (96, 128) and 0 <= probs.min() and probs.max() <= 1


def test_predict_split_with_perfect_prediction(workspace, tmp_path):
    out = tmp_path / "pred"
    assert run("predict", "--checkpoint", workspace / "oracle.ckpt", "--data-root",
               workspace / "data", "--split", "fix", "--out", out) == 0
    overlay = np.array(Image.open(out / "fix_0000_overlay.png").convert("RGB"))
    mask = read_mask(workspace / "data" / "fix" / "masks" / "fix_0000_segmentation.png")
    body = overlay[OverlaySpec().band_height:]
    assert np.all(body[mask > 0] == (0, 255, 0))
    assert count_colours(overlay) == {"tp": int(mask.sum()), "fn": 0, "fp": 0}


def test_predict_without_ground_truth(workspace, tmp_path):
    loose = tmp_path / "loose"
    loose.mkdir()
    src = workspace / "data" / "fix" / "images" / "fix_0001.png"
    (loose / "lesion.png").write_bytes(src.read_bytes())
    out = tmp_path / "pred"
    assert run("predict", "--checkpoint", workspace / "oracle.ckpt", "--out", out,
               loose / "lesion.png") == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "lesion_mask.png", "lesion_prob.npy", "predict_summary.json"]


def test_predict_unreadable_image(workspace, tmp_path):
    bad = tmp_path / "bad.jpg"
    bad.write_bytes(b"not an image")
    assert run("predict", "--checkpoint", workspace / "oracle.ckpt", "--out",
               tmp_path / "o", bad) == 2


def test_overlay_spec_invariants():
    with pytest.raises(ValueError):
        OverlaySpec(fp=(0, 255, 0))
    with pytest.raises(ValueError):
        OverlaySpec(tp=(128, 128, 128))
    image = np.full((20, 40, 3), 0.5)
    pred = np.zeros((20, 40), np.uint8)
    gt = np.zeros((20, 40), np.uint8)
    pred[2:8, 2:8] = 1
    gt[4:10, 4:10] = 1
    overlay, legend = render_overlay(image, pred, gt)
    assert overlay.shape == (34, 40, 3)
    assert count_colours(overlay) == {"tp": 16, "fn": 20, "fp": 20}


# --- compare ---------------------------------------------------------------------

def test_compare(workspace, oracle_eval, tmp_path, capsys):
    assert run("train", "--network", "unet", "--data-root", workspace / "data", "--split", "fix",
               "--height", 96, "--width", 128, "--epochs", 0, "--out", tmp_path / "u") == 0
    untrained = tmp_path / "u" / "best.ckpt"
    assert run("evaluate", "--checkpoint", untrained, "--data-root", workspace / "data",
               "--split", "fix", "--out", tmp_path / "eval_u") == 0
    assert run("compare", oracle_eval, tmp_path / "eval_u", "--out", tmp_path / "cmp") == 0
    lines = (tmp_path / "cmp" / "compare.csv").read_text().splitlines()
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[0] == "1" and first[1] == oracle_eval.name and float(first[5]) == 1.0
    assert int(lines[2].split(",")[4]) > 30_000_000
    assert (tmp_path / "cmp" / "roc_compare.png").exists()

    assert run("compare", oracle_eval, "--out", tmp_path / "c2") == 1
    assert run("evaluate", "--checkpoint", workspace / "oracle.ckpt", "--data-root",
               workspace / "data", "--split", "other", "--out", tmp_path / "eval_other") == 0
    capsys.readouterr()
    assert run("compare", oracle_eval, tmp_path / "eval_other", "--out", tmp_path / "c3") == 1
    assert "different test splits" in capsys.readouterr().err

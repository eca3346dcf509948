import json
import shutil
import subprocess

import numpy as np
import pytest

from dermpipe.cli import main
from dermpipe.constants import CLASSES
from dermpipe.folds import (ManifestRow, read_folds, read_weights,
                            write_manifest)
from dermpipe.meta import MetaRecord
from dermpipe.tta import PredictionMatrix, read_predictions, write_predictions
from helpers import random_probs


def make_manifest(path, counts):
    """counts: label -> row count. Each image is its own lesion."""
    rows = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            rows.append(ManifestRow(f"img{i:04d}", f"les{i:04d}", label,
                                    "main", MetaRecord(age=50.0)))
            i += 1
    write_manifest(path, rows)
    return rows


def one_hotish(label_idx):
    row = np.full(9, 0.0125)
    row[label_idx] = 0.9
    return row


# ---------------------------------------------------------------------------
# weights

def test_weights_command(tmp_path):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 50, "NV": 25, "BCC": 25})
    out = tmp_path / "weights.csv"
    assert main(["weights", "--manifest", str(manifest), "--out", str(out)]) == 0
    assert read_weights(out) == {"MEL": 2.0, "NV": 4.0, "BCC": 4.0}


def test_weights_k_flag_overrides(tmp_path):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 96, "NV": 4})
    out = tmp_path / "weights.csv"
    assert main(["weights", "--manifest", str(manifest), "--out", str(out),
                 "--k", "0.5"]) == 0
    wts = read_weights(out)
    assert abs(wts["NV"] - 5.0) < 1e-7
    assert abs(wts["MEL"] - np.sqrt(100 / 96)) < 1e-7  # file keeps 9 digits
    assert main(["weights", "--manifest", str(manifest), "--out", str(out),
                 "--k", "0"]) == 0
    assert read_weights(out) == {"MEL": 1.0, "NV": 1.0}


def test_weights_config_env_var(tmp_path, monkeypatch):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 96, "NV": 4})
    env_cfg = tmp_path / "env.ini"
    env_cfg.write_text("[loss]\nk = 0.5\n")
    monkeypatch.setenv("DERMPIPE_CONFIG", str(env_cfg))
    out = tmp_path / "weights.csv"
    assert main(["weights", "--manifest", str(manifest), "--out", str(out)]) == 0
    assert abs(read_weights(out)["NV"] - 5.0) < 1e-9
    # an explicit --config wins over the environment
    flag_cfg = tmp_path / "flag.ini"
    flag_cfg.write_text("[loss]\nk = 0\n")
    assert main(["weights", "--manifest", str(manifest), "--out", str(out),
                 "--config", str(flag_cfg)]) == 0
    assert read_weights(out) == {"MEL": 1.0, "NV": 1.0}


# ---------------------------------------------------------------------------
# synth and split-folds

def test_synth_deterministic(tmp_path):
    for run in range(2):
        rc = main(["synth", "--out", str(tmp_path / f"run{run}"), "--images", "20",
                   "--seed", "5", "--no-render"])
        assert rc == 0
    assert (tmp_path / "run0" / "features.bin").read_bytes() == \
           (tmp_path / "run1" / "features.bin").read_bytes()
    assert (tmp_path / "run0" / "manifest.csv").read_bytes() == \
           (tmp_path / "run1" / "manifest.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::dermpipe.errors.TooFewLesions")
def test_split_folds_command(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--images", "50",
                 "--no-render"]) == 0
    folds_csv = tmp_path / "folds.csv"
    assert main(["split-folds", "--manifest", str(corpus / "manifest.csv"),
                 "--out", str(folds_csv), "--seed", "3"]) == 0
    assignment = read_folds(folds_csv)
    assert set(assignment.values()) == {0, 1, 2, 3, 4}
    main_imgs = {r.image for r in
                 __import__("dermpipe.folds", fromlist=["read_manifest"])
                 .read_manifest(corpus / "manifest.csv")}
    assert set(assignment) == main_imgs


# ---------------------------------------------------------------------------
# evaluate

def write_eval_pair(tmp_path, n_per_class=3):
    # truth carries known classes only; the unknown class is never a label
    ids, probs, truth_lines = [], [], ["image,label"]
    i = 0
    for c, label in enumerate(CLASSES[:8]):
        for _ in range(n_per_class):
            ids.append(f"im{i:03d}")
            probs.append(one_hotish(c))
            truth_lines.append(f"im{i:03d},{label}")
            i += 1
    pred = tmp_path / "pred.csv"
    write_predictions(pred, PredictionMatrix(ids, np.array(probs)))
    truth = tmp_path / "truth.csv"
    truth.write_text("\n".join(truth_lines) + "\n")
    return pred, truth


def test_evaluate_perfect_predictions(tmp_path, capsys):
    pred, truth = write_eval_pair(tmp_path)
    rc = main(["evaluate", "--pred", str(pred), "--truth", str(truth),
               "--out-dir", str(tmp_path / "rep"), "--json"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["command"] == "evaluate"
    assert summary["mean_sensitivity"] == 1.0
    report = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert report["mean_sensitivity"] == 1.0
    lines = (tmp_path / "rep" / "class_report.csv").read_text().splitlines()
    assert lines[0] == "class,auc,auc_s,sensitivity,specificity"
    assert len(lines) == 1 + 8


def test_evaluate_reports_land_beside_predictions(tmp_path):
    pred, truth = write_eval_pair(tmp_path)
    assert main(["evaluate", "--pred", str(pred), "--truth", str(truth)]) == 0
    assert (tmp_path / "class_report.csv").exists()
    assert (tmp_path / "summary.json").exists()


def test_evaluate_auc_s_raw_column(tmp_path):
    pred, truth = write_eval_pair(tmp_path)
    assert main(["evaluate", "--pred", str(pred), "--truth", str(truth),
                 "--auc-s-raw"]) == 0
    header = (tmp_path / "class_report.csv").read_text().splitlines()[0]
    assert header == "class,auc,auc_s,sensitivity,specificity,auc_s_raw"


# ---------------------------------------------------------------------------
# exit codes and stdout discipline

def test_unknown_subcommand_exits_64():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 64


def test_missing_required_flag_exits_64():
    with pytest.raises(SystemExit) as exc:
        main(["weights", "--out", "w.csv"])
    assert exc.value.code == 64


def test_missing_input_file_exits_2(tmp_path):
    rc = main(["evaluate", "--pred", str(tmp_path / "absent.csv"),
               "--truth", str(tmp_path / "t.csv")])
    assert rc == 2


def test_validation_error_exits_1(tmp_path):
    pred, _ = write_eval_pair(tmp_path)
    bad_truth = tmp_path / "bad.csv"
    bad_truth.write_text("image,diagnosis\nim000,MEL\n")
    rc = main(["evaluate", "--pred", str(pred), "--truth", str(bad_truth)])
    assert rc == 1


def test_bad_config_value_exits_1(tmp_path):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 2, "NV": 2})
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[loss]\nk = -2\n")
    rc = main(["weights", "--manifest", str(manifest),
               "--out", str(tmp_path / "w.csv"), "--config", str(cfg)])
    assert rc == 1


def test_stdout_silent_without_json_flag(tmp_path, capsys):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 2, "NV": 2})
    assert main(["weights", "--manifest", str(manifest),
                 "--out", str(tmp_path / "w.csv")]) == 0
    assert capsys.readouterr().out == ""


def test_predict_fold_flags_must_pair(tmp_path):
    corpus = tmp_path / "c"
    assert main(["synth", "--out", str(corpus), "--images", "10",
                 "--no-render"]) == 0
    rc = main(["predict", "--manifest", str(corpus / "manifest.csv"),
               "--features", str(corpus / "features.bin"),
               "--checkpoint", str(corpus / "none.ckpt"),
               "--folds", str(corpus / "folds.csv"),
               "--out", str(tmp_path / "p.csv")])
    assert rc == 1


# ---------------------------------------------------------------------------
# ensemble-search

def build_config_dir(path, rows, ids):
    path.mkdir(parents=True, exist_ok=True)
    write_predictions(path / "val_fold0.csv",
                      PredictionMatrix(ids, np.array(rows)))


def test_ensemble_search_command(tmp_path):
    ids = [f"i{k}" for k in range(8)]
    rows_a, rows_b = [], []
    for c in range(8):
        wrong = np.full(9, 0.05)
        wrong[(c + 1) % 8] = 0.60
        rows_a.append(one_hotish(c) if c <= 5 else wrong)
        rows_b.append(one_hotish(c) if c >= 2 else wrong)
    build_config_dir(tmp_path / "cfgA", rows_a, ids)
    build_config_dir(tmp_path / "cfgB", rows_b, ids)
    manifest = tmp_path / "manifest.csv"
    write_manifest(manifest, [
        ManifestRow(ids[c], None, CLASSES[c], "main", MetaRecord())
        for c in range(8)])
    report = tmp_path / "report.json"
    val_out = tmp_path / "val.csv"
    rc = main(["ensemble-search",
               "--configs", str(tmp_path / "cfgA"), str(tmp_path / "cfgB"),
               "--manifest", str(manifest), "--out", str(report),
               "--per-subset-scores", "--val-out", str(val_out)])
    assert rc == 0
    payload = json.loads(report.read_text())
    assert payload["subset"] == ["cfgA", "cfgB"]
    assert payload["S_star"] == 1.0
    assert payload["per_subset_scores"]["cfgA"] == 0.75
    assert len(payload["per_subset_scores"]) == 3
    merged = read_predictions(val_out)
    assert merged.ids == ids


def test_ensemble_search_fold_set_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    ids = [f"i{k}" for k in range(8)]
    cfg_dir = tmp_path / "cfgA"
    build_config_dir(cfg_dir, random_probs(rng, 8), ids)
    write_predictions(cfg_dir / "test_fold1.csv",
                      PredictionMatrix(ids, random_probs(rng, 8)))
    manifest = tmp_path / "manifest.csv"
    write_manifest(manifest, [
        ManifestRow(ids[c], None, CLASSES[c], "main", MetaRecord())
        for c in range(8)])
    rc = main(["ensemble-search", "--configs", str(cfg_dir),
               "--manifest", str(manifest), "--out", str(tmp_path / "r.json")])
    assert rc == 1


# ---------------------------------------------------------------------------
# the full chain, minimally

@pytest.mark.filterwarnings("ignore::dermpipe.errors.TooFewLesions")
def test_train_predict_evaluate_chain(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--images", "40",
                 "--classes", "8", "--separation", "8", "--no-render",
                 "--seed", "2"]) == 0
    manifest = corpus / "manifest.csv"
    folds_csv = tmp_path / "folds.csv"
    assert main(["split-folds", "--manifest", str(manifest),
                 "--out", str(folds_csv)]) == 0
    heads = tmp_path / "heads"
    cfg = tmp_path / "pipeline.ini"
    cfg.write_text("[head]\nh = 16\nd = 24\neval_every = 2\n")
    assert main(["train-head", "--manifest", str(manifest),
                 "--features", str(corpus / "features.bin"),
                 "--folds", str(folds_csv), "--fold", "0",
                 "--epochs", "4", "--lr", "0.02",
                 "--out-dir", str(heads), "--config", str(cfg)]) == 0
    assert (heads / "fold0_best.ckpt").exists()
    assert (heads / "fold0_last.ckpt").exists()
    history = (heads / "fold0_history.csv").read_text().splitlines()
    assert len(history) == 1 + 4

    pred = tmp_path / "val_fold0.csv"
    assert main(["predict", "--manifest", str(manifest),
                 "--features", str(corpus / "features.bin"),
                 "--checkpoint", str(heads / "fold0_best.ckpt"),
                 "--folds", str(folds_csv), "--fold", "0",
                 "--mode", "ss", "--config", str(cfg),
                 "--out", str(pred)]) == 0
    pm = read_predictions(pred)
    assignment = read_folds(folds_csv)
    assert pm.ids == sorted(i for i, f in assignment.items() if f == 0)

    # a single fold omits some classes, so evaluate a full-manifest prediction
    rr_pred = tmp_path / "rr_all.csv"
    assert main(["predict", "--manifest", str(manifest),
                 "--features", str(corpus / "features.bin"),
                 "--checkpoint", str(heads / "fold0_best.ckpt"),
                 "--mode", "rr", "--config", str(cfg),
                 "--out", str(rr_pred)]) == 0
    assert len(read_predictions(rr_pred).ids) == 40

    assert main(["evaluate", "--pred", str(rr_pred), "--truth", str(manifest),
                 "--out-dir", str(tmp_path / "rep")]) == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert 0.0 <= summary["mean_sensitivity"] <= 1.0


@pytest.mark.filterwarnings("ignore::dermpipe.errors.TooFewLesions")
def test_predict_jobs_parallel_identical(tmp_path):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--images", "24",
                 "--classes", "8", "--no-render", "--seed", "4"]) == 0
    heads = tmp_path / "heads"
    folds_csv = tmp_path / "folds.csv"
    main(["split-folds", "--manifest", str(corpus / "manifest.csv"),
          "--out", str(folds_csv)])
    cfg = tmp_path / "pipeline.ini"
    cfg.write_text("[head]\nh = 8\nd = 8\n")
    main(["train-head", "--manifest", str(corpus / "manifest.csv"),
          "--features", str(corpus / "features.bin"),
          "--folds", str(folds_csv), "--fold", "0", "--epochs", "2",
          "--lr", "0.01", "--out-dir", str(heads), "--config", str(cfg)])
    outs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"pred_j{jobs}.csv"
        assert main(["predict", "--manifest", str(corpus / "manifest.csv"),
                     "--features", str(corpus / "features.bin"),
                     "--checkpoint", str(heads / "fold0_best.ckpt"),
                     "--config", str(cfg), "--jobs", jobs,
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


@pytest.mark.skipif(shutil.which("dermpipe") is None,
                    reason="console script not on PATH")
def test_installed_entrypoint(tmp_path):
    manifest = tmp_path / "manifest.csv"
    make_manifest(manifest, {"MEL": 3, "NV": 1})
    proc = subprocess.run(
        ["dermpipe", "weights", "--manifest", str(manifest),
         "--out", str(tmp_path / "w.csv"), "--json"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    summary = json.loads(proc.stdout)
    assert summary["command"] == "weights"
    wts = read_weights(tmp_path / "w.csv")
    assert abs(wts["MEL"] - 4 / 3) < 1e-7 and wts["NV"] == 4.0

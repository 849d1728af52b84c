import json
import re
import subprocess
import sys
from pathlib import Path

import pytest

from detkit.cli import main
from detkit.engine import load_checkpoint

REPO = Path(__file__).resolve().parents[1]
DAB_CONFIG = str(REPO / "projects" / "dab-detr" / "configs" / "toy_shapes.py")
DETR_CONFIG = str(REPO / "projects" / "detr" / "configs" / "toy_shapes.py")

# every training test runs a handful of iterations; milestones must clear too
FAST = ["train.max_iter=3", "train.warmup_iters=1", "train.lr_milestones=()",
        "train.log_every=1"]


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    code = main(["train", "--config", DAB_CONFIG, "--out", str(out), *FAST])
    assert code == 0
    return out


def _write_broken_config(tmp_path: Path) -> str:
    path = tmp_path / "broken.py"
    path.write_text(
        "from detkit import L\n"
        'project = "broken"\n'
        'model = L(int, base="not a number")\n'
    )
    return str(path)


# ---------------------------------------------------------------------------
# train


def test_train_override_controls_iteration_count(trained_run):
    state = load_checkpoint(trained_run / "final.ckpt")
    assert state.iteration == 3
    lines = (trained_run / "train_log.jsonl").read_text().strip().splitlines()
    assert json.loads(lines[-1])["iteration"] == 3


def test_train_writes_config_dump_and_log(trained_run):
    assert (trained_run / "config_dump.py").exists()
    assert (trained_run / "train_log.jsonl").exists()


def test_config_dump_reproduces_the_run(trained_run, tmp_path):
    # the dump is itself a loadable config; retraining from it must produce a
    # byte-identical checkpoint
    rerun = tmp_path / "rerun"
    code = main(["train", "--config", str(trained_run / "config_dump.py"),
                 "--out", str(rerun)])
    assert code == 0
    original = (trained_run / "final.ckpt").read_bytes()
    assert (rerun / "final.ckpt").read_bytes() == original


def test_train_same_seed_is_deterministic(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", "--config", DETR_CONFIG, "--out", str(out), *FAST]) == 0
    assert (outs[0] / "final.ckpt").read_bytes() == (outs[1] / "final.ckpt").read_bytes()


def test_train_seed_flag_changes_the_run(tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out, seed in zip(outs, ("7", "8")):
        assert main(["train", "--config", DETR_CONFIG, "--out", str(out),
                     "--seed", seed, *FAST]) == 0
    assert (outs[0] / "final.ckpt").read_bytes() != (outs[1] / "final.ckpt").read_bytes()


def test_ema_training_writes_second_checkpoint(tmp_path):
    out = tmp_path / "ema"
    code = main(["train", "--config", DAB_CONFIG, "--out", str(out), *FAST,
                 "train.ema_decay=0.99"])
    assert code == 0
    assert (out / "final.ckpt").exists() and (out / "ema.ckpt").exists()
    plain = load_checkpoint(out / "final.ckpt")
    ema = load_checkpoint(out / "ema.ckpt")
    assert plain.ema is not None and ema.ema is None
    assert set(plain.model) == set(ema.model)


def test_bad_override_key_exits_2(tmp_path, capsys):
    code = main(["train", "--config", DAB_CONFIG, "--out", str(tmp_path),
                 "train.not_a_field=1"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unparseable_override_exits_2(tmp_path):
    assert main(["train", "--config", DAB_CONFIG, "--out", str(tmp_path),
                 "no_equals_sign"]) == 2


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.py")]) == 2


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# eval


def test_eval_writes_metrics_and_results(trained_run, tmp_path):
    out = tmp_path / "eval"
    code = main(["eval", "--config", DAB_CONFIG,
                 "--checkpoint", str(trained_run / "final.ckpt"), "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"}
    results = json.loads((out / "results.json").read_text())
    assert all(set(r) == {"image_id", "category_id", "bbox", "score"} for r in results)


def test_eval_is_deterministic(trained_run, tmp_path):
    payloads = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["eval", "--config", DAB_CONFIG,
                     "--checkpoint", str(trained_run / "final.ckpt"),
                     "--out", str(out)]) == 0
        payloads.append((out / "metrics.json").read_bytes())
    assert payloads[0] == payloads[1]


def test_eval_nms_is_off_unless_requested(trained_run, tmp_path):
    # --no-nms with a threshold must equal giving no flags at all
    payloads = []
    for name, flags in (("plain", []), ("forced", ["--nms-threshold", "0.8", "--no-nms"])):
        out = tmp_path / name
        assert main(["eval", "--config", DAB_CONFIG,
                     "--checkpoint", str(trained_run / "final.ckpt"),
                     "--out", str(out), *flags]) == 0
        payloads.append((out / "metrics.json").read_bytes())
    assert payloads[0] == payloads[1]


def test_eval_nms_threshold_accepted(trained_run, tmp_path):
    assert main(["eval", "--config", DAB_CONFIG,
                 "--checkpoint", str(trained_run / "final.ckpt"),
                 "--out", str(tmp_path), "--nms-threshold", "0.5"]) == 0


def test_corrupt_checkpoint_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", DAB_CONFIG, "--checkpoint", str(bad),
                 "--out", str(tmp_path / "out")]) == 1
    capsys.readouterr()


def test_incompatible_checkpoint_exits_1(trained_run, tmp_path, capsys):
    code = main(["eval", "--config", DETR_CONFIG,
                 "--checkpoint", str(trained_run / "final.ckpt"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert "does not fit" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# benchmark


def test_benchmark_emits_one_row_per_model(tmp_path, capsys):
    report = tmp_path / "report.md"
    code = main(["benchmark", "--configs", DETR_CONFIG, DAB_CONFIG,
                 "--warmup", "1", "--timed", "10", "--out", str(report)])
    assert code == 0
    capsys.readouterr()
    lines = report.read_text().strip().splitlines()
    assert len(lines) == 4  # header, separator, two model rows
    assert lines[2].startswith("| detr |")
    assert lines[3].startswith("| dab-detr |")
    assert all(line.count("|") == 14 for line in lines if line.startswith("| d"))


def test_benchmark_isolates_a_broken_model(tmp_path, capsys):
    broken = _write_broken_config(tmp_path)
    report = tmp_path / "report.md"
    code = main(["benchmark", "--configs", DETR_CONFIG, broken,
                 "--warmup", "1", "--timed", "10", "--out", str(report)])
    assert code == 0
    capsys.readouterr()
    text = report.read_text()
    assert "| detr |" in text
    assert "| broken | - | error:" in text


def test_benchmark_all_broken_exits_1(tmp_path, capsys):
    broken = _write_broken_config(tmp_path)
    assert main(["benchmark", "--configs", broken, "--warmup", "1", "--timed", "10"]) == 1
    assert "benchmark failed" in capsys.readouterr().err


def test_benchmark_static_columns_are_deterministic(tmp_path, capsys):
    report = tmp_path / "report.csv"
    code = main(["benchmark", "--configs", DETR_CONFIG, DETR_CONFIG,
                 "--warmup", "1", "--timed", "10",
                 "--format", "csv", "--out", str(report)])
    assert code == 0
    capsys.readouterr()
    rows = report.read_text().strip().splitlines()
    first, second = rows[1].split(","), rows[2].split(",")
    # identical configs must agree on everything except timing measurements
    for column in (0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10):
        assert first[column] == second[column]


# ---------------------------------------------------------------------------
# analyze


def test_analyze_params(capsys):
    assert main(["analyze", "--config", DAB_CONFIG, "--tool", "params"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("params: total=")
    total = int(out.split("total=")[1].split()[0])
    assert total > 10_000


def test_analyze_flops(capsys):
    assert main(["analyze", "--config", DAB_CONFIG, "--tool", "flops"]) == 0
    assert "GFLOPs:" in capsys.readouterr().out


def test_analyze_fps(capsys):
    assert main(["analyze", "--config", DAB_CONFIG, "--tool", "fps",
                 "--warmup", "1", "--timed", "10"]) == 0
    assert "FPS:" in capsys.readouterr().out


def test_analyze_unknown_tool_exits_2(capsys):
    assert main(["analyze", "--config", DAB_CONFIG, "--tool", "watts"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# ablate


@pytest.mark.parametrize("study,expected_rows", [("nms", 2), ("freeze", 3), ("hparams", 4)])
def test_ablate_row_counts(study, expected_rows, tmp_path, capsys):
    out = tmp_path / study
    code = main(["ablate", "--study", study, "--config", DAB_CONFIG,
                 "--out", str(out), *FAST])
    assert code == 0
    capsys.readouterr()
    lines = (out / "ablation.md").read_text().strip().splitlines()
    assert len(lines) == 2 + expected_rows
    # the first variant is the reference; later rows carry a signed delta
    assert re.search(r"\([+-]", lines[2]) is None
    assert all(re.search(r"\([+-]\d+\.\d\)", line) for line in lines[3:])


def test_ablate_unknown_study_exits_2(capsys):
    assert main(["ablate", "--study", "dropout", "--config", DAB_CONFIG]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# packaging


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "detkit.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "train" in proc.stdout and "ablate" in proc.stdout


def test_core_package_never_references_project_configs():
    # the library must stay importable and fully functional without projects/
    hits = [
        path for path in (REPO / "src" / "detkit").rglob("*.py")
        if "projects/" in path.read_text()
    ]
    assert hits == []

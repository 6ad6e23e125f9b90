import csv
import json
import os

import pytest

from rkto.cli import main
from tests.conftest import DATA_DIR

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MINIMAL = os.path.join(ROOT, "configs", "minimal.yaml")
THEOREM = os.path.join(ROOT, "configs", "theorem.yaml")


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def out(tmp_path):
    return tmp_path / "runs"


@pytest.fixture
def generated(out):
    assert run("generate", MINIMAL, "--set", f"output_dir={out}") == 0
    return out / "minimal"


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def test_generate_reproduces_golden_and_creates_dirs(generated):
    assert (generated / "config.resolved.json").exists()
    for name in ("examples.jsonl", "manifest.json"):
        assert _read(generated / "dataset" / name) == _read(os.path.join(DATA_DIR, "golden", name))


def test_invalid_key_exits_2_naming_it(out, capsys):
    assert run("generate", MINIMAL, "--set", f"output_dir={out}", "--set", "train.bogus=1") == 2
    assert "train.bogus" in capsys.readouterr().err


def test_invalid_value_exits_2(out, capsys):
    assert run("generate", MINIMAL, "--set", f"output_dir={out}", "--set", "vocab_size=3") == 2
    assert "generation" in capsys.readouterr().err


def test_missing_config_exits_3(tmp_path):
    assert run("generate", tmp_path / "nope.yaml") == 3


def test_train_without_dataset_exits_3(out):
    assert run("train", MINIMAL, "--set", f"output_dir={out}") == 3


def _metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh]


def test_sft_phase_descends(generated, out):
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--phase", "sft",
               "--set", "sft_epochs=6", "--set", "sft_lr=0.02", "--set", "rkto_lr=0.01") == 0
    losses = [r["sft_loss"] for r in _metrics(generated / "train-sft" / "metrics.jsonl") if r["phase"] == "sft"]
    assert losses[-1] < losses[0]
    assert (generated / "train-sft" / "policy.json").exists()


def test_full_run_is_byte_deterministic(generated, out):
    outputs = []
    for _ in range(2):
        assert run("train", MINIMAL, "--set", f"output_dir={out}", "--restart") == 0
        d = generated / "train-full"
        outputs.append((_read(d / "metrics.jsonl"), _read(d / "checkpoint.json"), _read(d / "policy.json")))
    assert outputs[0] == outputs[1]


def test_resume_continues_bit_exactly(generated, out, tmp_path):
    assert run("train", MINIMAL, "--set", f"output_dir={out}") == 0
    d = generated / "train-full"
    whole = (_read(d / "metrics.jsonl"), _read(d / "policy.json"))
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--restart", "--max-steps", "3") == 0
    assert len(_metrics(d / "metrics.jsonl")) < len(whole[0].splitlines())
    assert run("train", MINIMAL, "--set", f"output_dir={out}") == 0
    assert (_read(d / "metrics.jsonl"), _read(d / "policy.json")) == whole


def test_changed_config_refuses_stale_checkpoint(generated, out):
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--max-steps", "2") == 0
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--set", "rkto_lr=0.0001") == 2


def test_train_from_initial_policy(generated, out):
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--phase", "sft") == 0
    init = generated / "train-sft" / "policy.json"
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--phase", "rkto", "--init", init) == 0
    phases = {r["phase"] for r in _metrics(generated / "train-rkto" / "metrics.jsonl")}
    assert "sft" not in phases and "rkto" in phases
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--phase", "rkto", "--restart",
               "--init", generated / "missing.json") == 3


def test_divergence_writes_diagnostic(generated, out):
    assert run("train", MINIMAL, "--set", f"output_dir={out}", "--set", "grad_clip=1e308",
               "--set", "sft_lr=1e308", "--set", "rkto_lr=1e307") == 1
    diag = json.loads(_read(generated / "train-full" / "diagnostic.json"))
    assert diag["record"]["rejected"] is True


def test_gradcheck_passes_and_bug_is_located(out, capsys):
    args = ["gradcheck", MINIMAL, "--set", f"output_dir={out}", "--set", "gradcheck.n_instances=4"]
    assert run(*args) == 0
    assert run(*args, "--inject-bug") == 1
    text = capsys.readouterr().out
    assert "FAIL" in text and "worst: instance" in text
    report = json.loads(_read(out / "minimal" / "gradcheck" / "gradcheck.json"))
    assert set(report["suites"]) == {"sft", "reflect", "log_prob"}


def test_theorem_needs_tabular(out):
    assert run("theorem", MINIMAL, "--set", f"output_dir={out}") == 4


def test_theorem_writes_trajectory(out):
    assert run("theorem", THEOREM, "--set", f"output_dir={out}", "--set", "theorem.n_steps=10") in (0, 1)
    with open(out / "theorem" / "theorem" / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 11
    verdict = json.loads(_read(out / "theorem" / "theorem" / "verdict.json"))
    assert verdict["final"] < verdict["initial"]


def _judgments(path, rows):
    with open(path, "w") as fh:
        for i, r in enumerate(rows):
            fh.write(json.dumps({"id": str(i), "judgments": r}) + "\n")


def test_stats_unanimous(tmp_path):
    path = tmp_path / "j.jsonl"
    _judgments(path, [{"a": v, "b": v, "c": v} for v in (1, 0, 1, 1)])
    assert run("stats", path, "--out", tmp_path / "st", "--resamples", "200") == 0
    with open(tmp_path / "st" / "per_rater.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["accuracy"]) for r in rows] == [1.0, 1.0, 1.0]


def test_stats_errors(tmp_path):
    path = tmp_path / "j.jsonl"
    path.write_text("")
    assert run("stats", path, "--out", tmp_path / "st") == 2
    assert run("stats", tmp_path / "absent.jsonl") == 3


def test_ablate_emits_table(generated, out):
    assert run("ablate", MINIMAL, "--set", f"output_dir={out}", "--sweep", "lambda_ref=0,0.5") == 0
    d = generated / "ablate"
    with open(d / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["value"] for r in rows] == ["0", "0.5"]
    assert (d / "metrics_lambda_ref=0.5.jsonl").exists()
    assert run("ablate", MINIMAL, "--set", f"output_dir={out}", "--sweep", "nokey=1") == 2


def test_theorem_negative_control_with_oversized_step(out):
    assert run("theorem", THEOREM, "--set", f"output_dir={out}", "--set", "theorem.lr=3.0") == 1
    verdict = json.loads(_read(out / "theorem" / "theorem" / "verdict.json"))
    assert verdict["passed"] is False and verdict["frac_nonincreasing"] < 0.95


def test_stats_reproduces_golden_report(tmp_path):
    golden = os.path.join(DATA_DIR, "judgments_report")
    assert run("stats", os.path.join(DATA_DIR, "judgments.jsonl"), "--out", tmp_path / "st",
               "--resamples", "2000", "--seed", "0") == 0
    for name in ("report.json", "per_rater.csv"):
        assert _read(tmp_path / "st" / name) == _read(os.path.join(golden, name))
    report = json.loads(_read(os.path.join(golden, "report.json")))
    # accuracy against the majority column, recomputed from the raw table
    with open(os.path.join(DATA_DIR, "judgments.jsonl")) as fh:
        rows = [json.loads(line)["judgments"] for line in fh]
    for rater in report["raters"]:
        acc = sum(r[rater] == m for r, m in zip(rows, report["majority"])) / len(rows)
        assert report["per_rater"][rater]["accuracy"] == pytest.approx(acc, abs=1e-15)

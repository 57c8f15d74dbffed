import json
import os
import subprocess
import sys

import pytest

from bandcert.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, THREADS_ENV,
                          UsageError, resolve_threads)

TINY = [
    "--set", "data.image_side=8", "--set", "data.train_size=12",
    "--set", "data.test_size=4", "--set", "data.num_classes=3",
    "--set", "model.embed_dim=16", "--set", "model.num_layers=1",
    "--set", "model.num_heads=2", "--set", "model.mlp_ratio=2.0",
    "--set", "model.codebook_size=8",
    "--set", "train.band_width=2", "--set", "train.epochs_per_stage=1",
    "--set", "train.finetune_epochs=1", "--set", "train.batch_size=8",
    "--set", "certify.band_width=2",
]


def run_cli(*args, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "bandcert.cli", *args],
                          capture_output=True, text=True, env=env)


def test_resolve_threads_precedence(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv(THREADS_ENV, "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2  # flag beats env
    monkeypatch.setenv(THREADS_ENV, "zero")
    with pytest.raises(UsageError):
        resolve_threads(None)
    with pytest.raises(UsageError):
        resolve_threads(0)


def test_unknown_subcommand_is_usage_error():
    proc = run_cli("trane")
    assert proc.returncode == EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    proc = run_cli("certify", "--out-dir", str(tmp_path / "o"),
                   "--checkpoint", "nope.ecvt", "--set", "train.nonsense=1")
    assert proc.returncode == EXIT_USAGE
    assert "nonsense" in proc.stderr


def test_missing_checkpoint_is_data_error(tmp_path):
    proc = run_cli("certify", *TINY, "--out-dir", str(tmp_path / "o"),
                   "--checkpoint", str(tmp_path / "absent.ecvt"))
    assert proc.returncode == EXIT_DATA


def test_export_config_roundtrip(tmp_path):
    first = run_cli("export-config", "--set", "train.band_width=3",
                    "--set", "certify.band_width=3")
    assert first.returncode == EXIT_OK
    assert "band_width = 3" in first.stdout

    path = tmp_path / "run.ini"
    path.write_text(first.stdout)
    second = run_cli("export-config", "--config", str(path))
    assert second.returncode == EXIT_OK
    assert second.stdout == first.stdout


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-train")
    proc = run_cli("train", *TINY, "--out-dir", str(out))
    assert proc.returncode == EXIT_OK, proc.stderr
    return out


def test_train_writes_artifacts(trained_dir):
    for name in ("model.ecvt", "codebook.eccb", "train_metrics.jsonl",
                 "config.ini", "meta.json"):
        assert (trained_dir / name).exists(), name
    lines = (trained_dir / "train_metrics.jsonl").read_text().splitlines()
    phases = {json.loads(ln)["phase"] for ln in lines}
    assert phases == {"stage", "finetune"}


def test_certify_writes_records_and_summary(trained_dir, tmp_path):
    out = tmp_path / "cert"
    proc = run_cli("certify", *TINY, "--out-dir", str(out),
                   "--checkpoint", str(trained_dir / "model.ecvt"))
    assert proc.returncode == EXIT_OK, proc.stderr
    summary = json.loads((out / "summary.json").read_text())
    assert summary["num_images"] == 4
    assert summary["band_width"] == 2
    records = [json.loads(ln)
               for ln in (out / "records.jsonl").read_text().splitlines()]
    assert len(records) == 4
    assert all("max_certified_m" in r for r in records)
    stdout_summary = json.loads(proc.stdout)
    assert stdout_summary == summary


def test_finetune_resumes_a_checkpoint(trained_dir, tmp_path):
    out = tmp_path / "ft"
    proc = run_cli("finetune", *TINY, "--out-dir", str(out),
                   "--checkpoint", str(trained_dir / "model.ecvt"))
    assert proc.returncode == EXIT_OK, proc.stderr
    assert (out / "model.ecvt").exists()
    assert (out / "finetune_metrics.jsonl").exists()


def test_bench_reports_flops_and_timing():
    # a 16-wide image so the band window is strictly smaller than the image
    proc = run_cli("bench", "--set", "data.image_side=16",
                   "--set", "model.embed_dim=16", "--set", "model.num_layers=1",
                   "--set", "model.num_heads=2", "--set", "model.mlp_ratio=2.0",
                   "--set", "model.codebook_size=8",
                   "--set", "train.band_width=4", "--set", "certify.band_width=4",
                   "--images", "2")
    assert proc.returncode == EXIT_OK, proc.stderr
    report = json.loads(proc.stdout)
    for key in ("attention_ratio", "attention_ratio_target", "flops_global",
                "flops_band_unit", "num_forwards", "forwards_bound",
                "measured_speedup", "seconds_global_sweep", "seconds_band_sweep"):
        assert key in report, key
    assert report["num_forwards"] <= report["forwards_bound"]
    assert report["flops_band_unit"]["total"] < report["flops_global"]["total"]


def test_oracle_subcommand_passes():
    proc = run_cli("oracle", "--tables", "20")
    assert proc.returncode == EXIT_OK, proc.stderr
    report = json.loads(proc.stdout)
    assert report["failures"] == []
    assert report["soundness_violations"] == 0
    assert report["geometry_mismatches"] == 0

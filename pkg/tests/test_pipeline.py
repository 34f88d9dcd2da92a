import json
import subprocess
import sys

import pytest

from histocluster import cli, pipeline
from histocluster.config import RunConfig, stage_seed
from histocluster.dcec import TrainConfig
from histocluster.qc import QcConfig
from histocluster.synthetic import write_demo_cohort

FLAGS = ["--tile-size", "32", "--k", "4", "--epochs", "2", "--qc-epochs", "3", "--widths", "8,16",
         "--blocks-per-stage", "1", "--sample-per-cluster", "3", "--alpha", "0.5"]


def small_config(**kw):
    base = dict(tile_size=32, sample_per_cluster=3, alpha=0.5,
                qc=QcConfig(epochs=3), train=TrainConfig(k=4, epochs=2, widths=(8, 16), blocks_per_stage=1))
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    return write_demo_cohort(tmp_path_factory.mktemp("data"), n_slides=6, seed=1)


def snapshot(run_dir):
    return {p.relative_to(run_dir).as_posix(): p.read_bytes()
            for p in sorted(run_dir.rglob("*")) if p.is_file()}


def test_run_is_deterministic_and_resumable(cohort, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = pipeline.run_pipeline(cohort, small_config(), a)
    assert ra.executed == pipeline.STAGES
    pipeline.run_pipeline(cohort, small_config(), b)
    sa, sb = snapshot(a), snapshot(b)
    assert sa.keys() == sb.keys()
    assert sa == sb
    for stage in pipeline.STAGES:
        stamp = json.loads(sa[f"stages/{stage}.json"])
        assert stamp["config_hash"] == ra.run_digest and stamp["seed"] == stage_seed(0, stage)

    # nothing to do on an unchanged rerun
    assert pipeline.run_pipeline(cohort, small_config(), a).executed == []
    # deleting the report reruns only the report
    (a / "report" / "report.md").unlink()
    assert pipeline.run_pipeline(cohort, small_config(), a).executed == ["report"]
    assert snapshot(a) == sa
    # deleting the cluster table reruns assignment; its output is byte-identical,
    # so downstream stamps still match and nothing else reruns
    (a / "clusters.tsv").unlink()
    assert pipeline.run_pipeline(cohort, small_config(), a).executed == ["assign"]
    assert snapshot(a) == sa
    # a modified intermediate invalidates its consumers
    trace = a / "train_trace.tsv"
    trace.write_text(trace.read_text() + "# edited\n")
    assert pipeline.run_pipeline(cohort, small_config(), a).executed == ["train"]


def test_missing_image_fails_before_work(cohort, tmp_path):
    text = cohort.read_text().replace("S003.png", "nope.png")
    bad = cohort.parent / "bad.tsv"
    bad.write_text(text)
    out = tmp_path / "run"
    with pytest.raises(pipeline.PipelineError) as err:
        pipeline.run_pipeline(bad, small_config(), out)
    assert err.value.slide == "S003" and err.value.stage == "manifest"
    assert not out.exists()


def test_duplicate_slide_rejected(cohort, tmp_path):
    lines = cohort.read_text().splitlines()
    dup = cohort.parent / "dup.tsv"
    dup.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(pipeline.PipelineError, match="duplicate"):
        pipeline.run_pipeline(dup, small_config(), tmp_path / "run")


def test_config_mismatch_aborts(cohort, tmp_path):
    out = tmp_path / "run"
    pipeline.run_pipeline(cohort, small_config(), out, stages=["tile"])
    with pytest.raises(pipeline.ConfigMismatchError):
        pipeline.run_pipeline(cohort, small_config(min_component=3), out, stages=["qc"])
    # a stage cannot run ahead of its inputs
    with pytest.raises(pipeline.PipelineError, match="'qc' has not been run"):
        pipeline.run_pipeline(cohort, small_config(), out, stages=["train"])


def test_stages_in_fresh_processes_match_single_run(cohort, tmp_path):
    one, many = tmp_path / "one", tmp_path / "many"
    assert cli.main(["run", "--manifest", str(cohort), "--out", str(one)] + FLAGS) == 0
    for stage in pipeline.STAGES:
        proc = subprocess.run([sys.executable, "-m", "histocluster.cli", stage, "--manifest", str(cohort),
                               "--out", str(many)] + FLAGS, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    assert snapshot(one) == snapshot(many)


def test_cli_reports_stage_errors(cohort, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cli.main(["train", "--manifest", str(cohort), "--out", out] + FLAGS) == 2
    assert "[train]" in capsys.readouterr().err
    assert cli.main(["run", "--manifest", str(cohort), "--out", out, "--ties", "exact"]) == 2
    assert "[config]" in capsys.readouterr().err


def test_config_roundtrip_and_digest():
    cfg = small_config()
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.digest() == cfg.digest()
    assert small_config(seed=1).digest() != cfg.digest()
    assert stage_seed(0, "qc") != stage_seed(0, "train") and stage_seed(0, "qc") == stage_seed(0, "qc")
    with pytest.raises(ValueError):
        RunConfig(tile_size=30)


def test_report_without_significant_clusters(cohort, tmp_path):
    run = pipeline.run_pipeline(cohort, small_config(alpha=1e-12), tmp_path / "run")
    text = (run.out / "report" / "report.md").read_text()
    assert "No clusters were significant" in text
    assert not list((run.out / "report").glob("km_*.svg"))


def test_report_with_significant_clusters(tmp_path):
    data = write_demo_cohort(tmp_path / "data", n_slides=12, seed=0)
    cfg = small_config(qc=QcConfig(epochs=10),
                       train=TrainConfig(k=4, epochs=5, base_lr=1e-3, widths=(8, 16), blocks_per_stage=1),
                       sample_per_cluster=5)
    run = pipeline.run_pipeline(data, cfg, tmp_path / "run")
    surv = json.loads((run.out / "survival.json").read_text())
    assert surv["significant"]
    text = (run.out / "report" / "report.md").read_text()
    assert "| Wald Test |" in text and "Univariate" in text
    for name in surv["significant"]:
        assert (run.out / "report" / f"km_cluster_{name}.svg").is_file()
    montage = (run.out / "report" / "montage.tsv").read_text().splitlines()
    assert len(montage) - 1 == 5 * len(surv["significant"])

import csv
import io
import json

import jsonschema
import pytest

from icu_agents import cli
from icu_agents.metrics import MetricReport, MetricValue
from icu_agents.report import REPORT_SCHEMA, ReportError, ReportRow, emit_report, parse_markdown, render_csv

ROW = ReportRow("qwen", "single_multimodal", "zero_shot", ("PS", "EHR"), MetricReport(
    MetricValue(0.6667, 0.6451, 0.6902), MetricValue(0.41, 0.38, 0.44), MetricValue(0.0233, 0.011, 0.035),
    n_samples=100, n_error_records=2, ci_method="percentile bootstrap"))
EMPTY = ReportRow("m", "majority_vote", "zero_shot", ("PS",), MetricReport(
    MetricValue(None), MetricValue(None), MetricValue(0.2, 0.1, 0.3), 5, 0))


def test_markdown_round_trip(tmp_path):
    path = emit_report([ROW, EMPTY], "markdown", tmp_path / "table")
    assert path.suffix == ".md"
    text = path.read_text()
    assert "0.667 (0.645 - 0.690)" in text
    rows = parse_markdown(text)
    assert rows[0]["auroc"] == 0.667 and rows[0]["auroc_ci"] == (0.645, 0.690)
    assert rows[0]["excluded"] == 2 and rows[1]["auroc"] is None


def test_csv_columns():
    rows = list(csv.DictReader(io.StringIO(render_csv([ROW]))))
    assert rows[0]["auroc"] == "0.667" and rows[0]["modalities"] == "PS,EHR"


def test_structured_validates(tmp_path):
    path = emit_report([ROW, EMPTY], "structured", tmp_path / "t")
    payload = json.loads(path.read_text())
    jsonschema.validate(payload, REPORT_SCHEMA)
    assert payload["rows"][0]["auroc"]["point"] == 0.6667


def test_emit_errors(tmp_path):
    with pytest.raises(ReportError):
        emit_report([], "csv", tmp_path / "x")
    with pytest.raises(ReportError):
        emit_report([ROW], "xml", tmp_path / "x")


@pytest.fixture
def synth(tmp_path):
    cohort = tmp_path / "cohort.jsonl"
    assert cli.main(["synth", "--n", "80", "--seed", "2", "--out", str(cohort)]) == 0
    oracle = tmp_path / "oracle.json"
    oracle.write_text(json.dumps({"oracle": "synthetic"}))
    return cohort, oracle


def test_cli_run_report_consensus(tmp_path, synth, capsys):
    cohort, oracle = synth
    out = tmp_path / "debate"
    code = cli.main(["run", "--cohort", str(cohort), "--protocol", "debate_unimodal", "--modalities",
                     "ps,ehr,rr", "--mock-script", str(oracle), "--out", str(out), "--bootstrap-n", "50",
                     "--cache-dir", str(tmp_path / "cache")])
    assert code == 0
    printed = capsys.readouterr().out
    assert "records: 16" in printed and "| Backbone" in printed
    assert (out / "report.json").exists() and (out / "report.csv").exists()

    assert cli.main(["report", str(out), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("backbone,protocol")

    assert cli.main(["consensus", str(out), "--cohort", str(cohort), "--format", "structured"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert sum(r["count"] for r in stats["rows"]) == stats["total"]


def test_cli_config_file_with_overrides(tmp_path, synth, capsys):
    cohort, oracle = synth
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(f"protocol: majority_vote\nmodalities: ps,ehr\nmock_script: {oracle}\nbootstrap_n: 30\n"
                   f"output_dir: {tmp_path / 'from_file'}\n")
    assert cli.main(["run", "--config", str(cfg), "--cohort", str(cohort), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").exists()
    assert not (tmp_path / "from_file").exists()


def test_cli_ablate(tmp_path, synth, capsys):
    cohort, oracle = synth
    assert cli.main(["ablate", "--cohort", str(cohort), "--mock-script", str(oracle), "--sets", "ps;ps,rr",
                     "--out", str(tmp_path / "abl"), "--max-samples", "5", "--bootstrap-n", "30"]) == 0
    assert capsys.readouterr().out.count("\n| ") == 3
    assert (tmp_path / "abl" / "ablation.md").exists()


def test_cli_reports_config_errors(tmp_path, synth, capsys):
    cohort, _ = synth
    code = cli.main(["run", "--cohort", str(cohort), "--protocol", "majority_vote", "--modalities", "ps"])
    assert code == 2
    assert "at least two modalities" in capsys.readouterr().err


def test_cli_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    cli.main(["synth", "--n", "20", "--seed", "4", "--out", str(a)])
    cli.main(["synth", "--n", "20", "--seed", "4", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.with_suffix(".oracle.json").read_text())

import json

import pandas as pd
import pytest

from src.setup.exceptions import DataFormatError
from src.setup.paths import METRICS_FILE, REPORT_FILE
from src.monitoring import (
    MetricsRow, TABLES_DIR_NAME, attacks_frame, build_report_tables, read_report_json, report_summary,
    write_metrics_csv, write_report_json
)
from src.attacks import AttackOutcome
from src.training_pipeline.training import save_run_artifacts


def test_metrics_csv_has_a_fixed_format(tmp_path):
    row = MetricsRow(round=1, test_acc=0.5, wm_acc=1.0, min_fss=0.95, mean_fss=0.975, client_fss=[0.95, 1.0], wm_steps=3)
    path = tmp_path / METRICS_FILE
    write_metrics_csv([row], path)

    assert path.read_text(encoding="utf-8") == (
        "round,test_acc,wm_acc,min_fss,mean_fss\n"
        "1,0.500000,1.000000,0.950000,0.975000\n"
    )


def test_empty_metrics_keep_their_header(tmp_path):
    path = tmp_path / METRICS_FILE
    write_metrics_csv([], path)
    assert path.read_text(encoding="utf-8") == "round,test_acc,wm_acc,min_fss,mean_fss\n"


def test_reports_round_trip_without_the_models(tmp_path, tiny_report):
    path = tmp_path / REPORT_FILE
    write_report_json(tiny_report, path)

    payload = json.loads(path.read_text(encoding="utf-8"))
    assert "global_model" not in payload
    assert "client_models" not in payload
    assert payload["config_hash"] == tiny_report.config_hash

    restored = read_report_json(path)
    assert restored.rounds == tiny_report.rounds
    assert restored.final_tr == tiny_report.final_tr
    assert restored.config == tiny_report.config
    assert restored.global_model is None


def test_corrupt_reports_are_rejected(tmp_path):
    path = tmp_path / REPORT_FILE
    path.write_text("{\"config_hash\": 3", encoding="utf-8")
    with pytest.raises(DataFormatError):
        read_report_json(path)


def test_summary_of_a_run(tiny_report):
    summary = report_summary(tiny_report)
    assert summary["rounds"] == 3
    assert summary["traceability_rate"] == 1.0
    assert summary["attacks"] == 0


def test_no_runs_means_no_tables(tmp_path, loguru_messages):
    assert build_report_tables(tmp_path) == []
    assert build_report_tables(tmp_path / "absent") == []
    assert not (tmp_path / TABLES_DIR_NAME).exists()
    assert any(level == "WARNING" for level, _ in loguru_messages)


def test_tables_of_a_saved_run(tmp_path, tiny_report):
    save_run_artifacts(tiny_report, tmp_path / "runs" / "tiny")
    written = build_report_tables(tmp_path / "runs")

    assert sorted(path.name for path in written) == [
        "attacks.csv", "client_fss.csv", "hd_vs_fss.csv", "rounds_long.csv", "summary.csv"
    ]
    assert all(path.parent == tmp_path / "runs" / TABLES_DIR_NAME for path in written)

    summary = pd.read_csv(tmp_path / "runs" / TABLES_DIR_NAME / "summary.csv")
    assert len(summary) == 1
    assert summary.loc[0, "config_hash"] == tiny_report.config_hash
    assert summary.loc[0, "tr"] == pytest.approx(tiny_report.final_tr)

    long = pd.read_csv(tmp_path / "runs" / TABLES_DIR_NAME / "rounds_long.csv")
    assert sorted(long["round"].unique().tolist()) == [0, 1, 2, 3]
    assert set(long["metric"]) == {"test_acc", "wm_acc", "min_fss", "mean_fss"}

    hd_rows = pd.read_csv(tmp_path / "runs" / TABLES_DIR_NAME / "hd_vs_fss.csv")
    assert hd_rows["fss_correct"].all()


def test_attack_frames_flatten_the_outcomes():
    outcome = AttackOutcome(
        attack_name="prune",
        setting="0.3:no_bn",
        adversary_id=1,
        test_acc_before=0.9,
        test_acc_after=0.88,
        wm_acc_before=1.0,
        wm_acc_after=0.97,
        fss_before=[0.1, 0.99, 0.2],
        fss_after=[0.1, 0.9, 0.2],
        traced_id_before=1,
        traced_id_after=1,
        verified_after=True,
        verdict="robust_case1"
    )
    frame = attacks_frame([outcome])

    assert "fss_before" not in frame.columns
    assert frame.loc[0, "adv_fss_before"] == 0.99
    assert frame.loc[0, "adv_fss_after"] == 0.9
    assert frame.loc[0, "verdict"] == "robust_case1"

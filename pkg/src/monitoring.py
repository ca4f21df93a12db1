"""
Everything a run leaves behind for people to read: the per-round metrics, the JSON report,
and the consolidated tables that `report` builds across many run directories.
"""
import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field

from src.attacks import AttackOutcome
from src.setup.config import ExperimentConfig
from src.setup.exceptions import DataFormatError
from src.setup.paths import ATTACKS_FILE, RECORDS_FILE, REPORT_FILE, client_checkpoint_name
from src.protection.fingerprint import hd_trace, load_records, trace, traceability_rate
from src.training_pipeline.checkpoints import load_model


METRIC_COLUMNS = ["round", "test_acc", "wm_acc", "min_fss", "mean_fss"]
TABLES_DIR_NAME = "tables"


class MetricsRow(BaseModel):
    round: int
    test_acc: float
    wm_acc: float
    min_fss: float
    mean_fss: float
    client_fss: list[float] = Field(default_factory=list)
    sampled_clients: list[int] = Field(default_factory=list)
    wm_steps: int = 0
    client_test_acc: list[float] = Field(default_factory=list)
    # Test accuracy of the aggregate before the watermark went in; None when nothing was embedded
    pre_wm_test_acc: float | None = None

    @property
    def mean_client_test_acc(self) -> float:
        return float(np.mean(self.client_test_acc)) if self.client_test_acc else float("nan")


class ExperimentReport(BaseModel):
    """
    The outcome of one experiment. Models and datasets ride along for in-process use but are
    never serialised; everything else is reproducible from the config except the wall-clock time.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ExperimentConfig
    config_hash: str
    initial_metrics: MetricsRow
    rounds: list[MetricsRow] = Field(default_factory=list)
    final_tr: float
    hd_agreement: float
    adversaries: list[int] = Field(default_factory=list)
    attack_outcomes: list[AttackOutcome] = Field(default_factory=list)
    wall_clock_seconds: float = 0.0

    global_model: Any = Field(default=None, exclude=True)
    client_models: Any = Field(default=None, exclude=True)
    trigger: Any = Field(default=None, exclude=True)
    records: Any = Field(default=None, exclude=True)
    test_set: Any = Field(default=None, exclude=True)
    client_data: Any = Field(default=None, exclude=True)

    @property
    def final_metrics(self) -> MetricsRow:
        return self.rounds[-1] if self.rounds else self.initial_metrics

    @property
    def final_test_acc(self) -> float:
        return self.final_metrics.test_acc

    @property
    def final_wm_acc(self) -> float:
        return self.final_metrics.wm_acc


def metrics_frame(rows: list[MetricsRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump(include=set(METRIC_COLUMNS)) for row in rows], columns=METRIC_COLUMNS)


def write_metrics_csv(rows: list[MetricsRow], path: Path) -> None:
    """One row per completed round. Fixed float formatting keeps the file byte-stable."""
    metrics_frame(rows).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def write_report_json(report: ExperimentReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=2), encoding="utf-8")


def read_report_json(path: Path) -> ExperimentReport:
    try:
        return ExperimentReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValueError as error:
        raise DataFormatError(f"{path} is not a readable report: {error}") from error


def attacks_frame(outcomes: list[AttackOutcome]) -> pd.DataFrame:
    return pd.DataFrame([outcome.to_row() for outcome in outcomes])


def write_attacks_csv(outcomes: list[AttackOutcome], path: Path) -> None:
    attacks_frame(outcomes).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def find_run_directories(output_dir: Path) -> list[Path]:
    return sorted({path.parent for path in Path(output_dir).rglob(REPORT_FILE)})


def _recompute_tracing(run_dir: Path, clients: int) -> tuple[float, list[dict]]:
    """
    Reload the client checkpoints and fingerprint records of a run and trace every model again.

    Returns:
        tuple[float, list[dict]]: the traceability rate and one FSS-vs-Hamming row per client
    """
    records = load_records(run_dir / RECORDS_FILE)
    models = [load_model(run_dir / client_checkpoint_name(client_id)) for client_id in range(clients)]

    rows = []
    for record, model in zip(records, models):
        by_fss = trace(model, records)
        by_hamming = hd_trace(model, records)
        rows.append({
            "client_id": record.client_id,
            "fss_traced_id": by_fss,
            "hd_traced_id": by_hamming.client_id,
            "hd_distance": by_hamming.distance,
            "hd_ambiguous": by_hamming.ambiguous,
            "fss_correct": by_fss == record.client_id,
            "hd_correct": by_hamming.client_id == record.client_id and not by_hamming.ambiguous,
        })

    return traceability_rate(models, records), rows


def build_report_tables(output_dir: Path) -> list[Path]:
    """
    Gather every run below output_dir into long-format CSV tables, keyed by config hash, in
    output_dir/tables.

    Returns:
        list[Path]: the files that were written; empty when there are no runs
    """
    output_dir = Path(output_dir)
    run_dirs = find_run_directories(output_dir) if output_dir.is_dir() else []
    if not run_dirs:
        logger.warning(f"There are no runs under {output_dir}, so no tables were written")
        return []

    summary_rows, long_rows, client_rows, attack_rows, hd_rows = [], [], [], [], []

    for run_dir in run_dirs:
        report = read_report_json(run_dir / REPORT_FILE)
        key = report.config_hash
        clients = report.config.fl.clients

        try:
            recomputed_tr, run_hd_rows = _recompute_tracing(run_dir, clients=clients)
        except (OSError, DataFormatError) as error:
            logger.warning(f"Could not reload the checkpoints of {run_dir}: {error}")
            recomputed_tr, run_hd_rows = np.nan, []

        summary_rows.append({
            "config_hash": key,
            "run_dir": str(run_dir),
            "clients": clients,
            "bits": report.config.fingerprint.bits,
            "rounds": report.config.fl.rounds,
            "dirichlet_xi": report.config.data.dirichlet_xi,
            "watermark": report.config.watermark.enabled,
            "fingerprint": report.config.fingerprint.enabled,
            "projection": report.config.watermark.projection,
            "freeze_bn": report.config.watermark.freeze_bn,
            "trigger_per_class": report.config.watermark.per_class,
            "final_test_acc": report.final_test_acc,
            "final_wm_acc": report.final_wm_acc,
            "final_client_test_acc": report.final_metrics.mean_client_test_acc,
            "final_min_fss": report.final_metrics.min_fss,
            "final_mean_fss": report.final_metrics.mean_fss,
            "tr": recomputed_tr,
            "hd_agreement": report.hd_agreement,
        })

        for row in [report.initial_metrics, *report.rounds]:
            for metric in METRIC_COLUMNS[1:]:
                long_rows.append({"config_hash": key, "round": row.round, "metric": metric, "value": getattr(row, metric)})
            for client_id, score in enumerate(row.client_fss):
                client_rows.append({"config_hash": key, "round": row.round, "client_id": client_id, "fss": score})

        attack_rows.extend({"config_hash": key, **outcome.to_row()} for outcome in report.attack_outcomes)
        hd_rows.extend({"config_hash": key, **row} for row in run_hd_rows)

    tables_dir = output_dir / TABLES_DIR_NAME
    tables_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "summary.csv": pd.DataFrame(summary_rows),
        "rounds_long.csv": pd.DataFrame(long_rows),
        "client_fss.csv": pd.DataFrame(client_rows),
        ATTACKS_FILE: pd.DataFrame(attack_rows),
        "hd_vs_fss.csv": pd.DataFrame(hd_rows),
    }

    written = []
    for name, frame in tables.items():
        path = tables_dir / name
        frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
        written.append(path)

    logger.success(f"Wrote {len(written)} tables covering {len(run_dirs)} runs to {tables_dir}")
    return written


def report_summary(report: ExperimentReport) -> dict[str, Any]:
    """The handful of numbers the CLI prints at the end of a run"""
    return {
        "config_hash": report.config_hash,
        "rounds": len(report.rounds),
        "test_acc": report.final_test_acc,
        "wm_acc": report.final_wm_acc,
        "client_test_acc": report.final_metrics.mean_client_test_acc,
        "min_fss": report.final_metrics.min_fss,
        "traceability_rate": report.final_tr,
        "hd_agreement": report.hd_agreement,
        "attacks": len(report.attack_outcomes),
    }


def dump_json(payload: dict[str, Any]) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=float)

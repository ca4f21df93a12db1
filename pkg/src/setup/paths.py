import os
from pathlib import Path

from tqdm import tqdm


PARENT_DIR = Path(__file__).parent.parent.parent.resolve()

DATA_DIR = PARENT_DIR/"data"
RUNS_DIR = PARENT_DIR/"runs"
DEFAULT_RUN_DIR = RUNS_DIR/"default"
CONFIGS_DIR = PARENT_DIR/"configs"

# Artefact names inside a single run directory
METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.json"
ATTACKS_FILE = "attacks.csv"
GLOBAL_CHECKPOINT = "global.ftck"
TRIGGER_SAMPLES = "trigger.ftck"
TRIGGER_LABELS = "trigger.json"
RECORDS_FILE = "records.json"
RECORD_KEYS = "records.keys.ftck"


def client_checkpoint_name(client_id: int) -> str:
    return f"client_{client_id}.ftck"


def make_needed_directories(extra_paths: list[Path] | None = None) -> None:
    """
    Create the data and run directories (plus any run-specific ones that are passed in) if
    they don't exist yet.

    Args:
        extra_paths (list[Path] | None, optional): further directories that a command is about to write into.
    """
    major_paths = [DATA_DIR, RUNS_DIR]
    if extra_paths is not None:
        major_paths.extend(extra_paths)

    for path in tqdm(iterable=major_paths, desc="Creating directories...", disable=len(major_paths) < 4):
        if not Path(path).exists():
            os.makedirs(path, exist_ok=True)

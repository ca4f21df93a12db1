import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from src.setup.config import (
    ExperimentConfig, FingerprintConfig, GaConfig, WatermarkConfig, apply_overrides, parse_experiment_config
)
from src.feature_pipeline.data_sourcing import Dataset, split_train_test, synth_blobs
from src.feature_pipeline.partitioning import partition_iid
from src.protection.fingerprint import FingerprintRecord, gen, linsert
from src.protection.watermark import GlobalMemory, TriggerSet, gembed, gen_trigger_set
from src.training_pipeline.federation import local_train
from src.training_pipeline.models import BnMlpModel
from src.training_pipeline.training import run_experiment


TINY_CONFIG = {
    "seed": 0,
    "output_dir": "runs/tiny",
    "fl": {"clients": 3, "rounds": 3, "participation_fraction": 1.0, "local_epochs": 2, "client_lr": 0.05},
    "model": {"hidden_widths": [32, 32]},
    "data": {"classes": 10, "dim": 16, "per_class": 40},
    "watermark": {"per_class": 3, "lr": 0.02},
    "fingerprint": {"bits": 32, "ga": {"population": 16, "generations": 20}},
}


@pytest.fixture
def loguru_messages():
    """(level, message) pairs of everything logged while the test runs"""
    messages = []
    handler_id = logger.add(
        lambda message: messages.append((message.record["level"].name, message.record["message"])), level="DEBUG"
    )
    yield messages
    logger.remove(handler_id)


@pytest.fixture
def blobs() -> Dataset:
    return synth_blobs(seed=0, classes=4, dim=8, per_class=40, spread=0.5)


@pytest.fixture
def small_model() -> BnMlpModel:
    return BnMlpModel(input_dim=8, hidden_widths=[16, 16], classes=4, seed=0)


@pytest.fixture
def tiny_payload() -> dict:
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_experiment(tiny_payload) -> ExperimentConfig:
    return parse_experiment_config(tiny_payload)


@pytest.fixture
def tiny_config_file(tmp_path, tiny_payload) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_payload), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def tiny_report():
    return run_experiment(parse_experiment_config(copy.deepcopy(TINY_CONFIG)), show_progress=False)


@dataclass
class ProtectedSetup:
    model: BnMlpModel
    trigger: TriggerSet
    records: list[FingerprintRecord]
    client_models: list[BnMlpModel]
    client_data: list[Dataset]
    test_set: Dataset
    fingerprint_cfg: FingerprintConfig


@pytest.fixture(scope="session")
def protected_setup() -> ProtectedSetup:
    """
    A well-trained 10-class model carrying a strongly embedded trigger set, and three
    fingerprinted copies of it, built directly from the primitives rather than a full run.
    """
    dataset = synth_blobs(seed=3, classes=10, dim=16, per_class=40, spread=0.5)
    train_set, test_set = split_train_test(dataset, test_fraction=0.2, seed=0)

    model = BnMlpModel(input_dim=16, hidden_widths=[32, 32], classes=10, seed=1)
    local_train(model, train_set, epochs=30, lr=0.05, batch_size=32, rng=np.random.default_rng(0))

    trigger = gen_trigger_set(classes=10, dim=16, per_class=3, noise_sigma=0.1, seed=2)
    gembed(model, trigger, GlobalMemory.zeros(model.layout), WatermarkConfig(lr=0.02, acc_threshold=1.0, max_iter=500))

    fingerprint_cfg = FingerprintConfig(bits=32)
    records = gen(clients=3, bits=32, gamma_size=model.gamma_size, seed=4, ga=GaConfig(population=16, generations=20))
    client_models = [linsert(model.copy(), record, fingerprint_cfg) for record in records]

    partition = partition_iid(train_set, clients=3, seed=5)
    client_data = [partition.client_data(train_set, client_id) for client_id in range(3)]

    return ProtectedSetup(
        model=model,
        trigger=trigger,
        records=records,
        client_models=client_models,
        client_data=client_data,
        test_set=test_set,
        fingerprint_cfg=fingerprint_cfg
    )


@pytest.fixture(scope="session")
def default_run():
    """
    Runs of the default configuration, cached for the whole session so that several slow
    tests can share one federation.
    """
    cache = {}

    def run(seed: int = 0, overrides: dict | None = None):
        key = (seed, tuple(sorted((overrides or {}).items())))
        if key not in cache:
            experiment = ExperimentConfig(seed=seed)
            if overrides:
                experiment = apply_overrides(experiment, overrides)
            cache[key] = run_experiment(experiment, show_progress=False)
        return cache[key]

    return run

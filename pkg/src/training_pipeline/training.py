"""
Runs a whole protected federation. Each round goes through the same four stages:

    1. sampled clients train locally (in parallel) and the server averages their updates
    2. the server embeds the global watermark into the aggregate, guarded by the global memory
    3. every client gets its own copy of the watermarked model with its fingerprint inserted
    4. the fingerprinted copies are distributed, and clients continue from them next round

Every random draw comes from one SeedSequence spawned off the experiment seed, one stream
per concern, so a run is reproducible from (config, seed) no matter how the clients are
scheduled on threads.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import final

import numpy as np
from loguru import logger
from tqdm import tqdm

from src.attacks import run_attack_sweep
from src.monitoring import ExperimentReport, MetricsRow, write_attacks_csv, write_metrics_csv, write_report_json
from src.setup.config import ExperimentConfig, FlConfig, ProtectionConfig, config as settings
from src.setup.paths import (
    ATTACKS_FILE, GLOBAL_CHECKPOINT, METRICS_FILE, RECORDS_FILE, REPORT_FILE, TRIGGER_SAMPLES, client_checkpoint_name
)
from src.feature_pipeline.data_sourcing import Dataset, load_idx, split_train_test, synth_blobs
from src.feature_pipeline.partitioning import Partition, partition_dirichlet, partition_iid
from src.protection.fingerprint import (
    FingerprintContext, FingerprintRecord, gen, hd_trace, linsert, record_fss, save_records, trace, traceability_rate
)
from src.protection.watermark import GlobalMemory, TriggerSet, WatermarkContext, gembed, gen_trigger_set, save_trigger_set, trigger_accuracy
from src.training_pipeline.checkpoints import save_model
from src.training_pipeline.federation import apply_update, fedavg, local_train, sample_clients
from src.training_pipeline.models import BnMlpModel, accuracy


@dataclass
class Federation:
    """The fixed environment of a run: who holds which data, and everyone's random stream"""
    train_set: Dataset
    test_set: Dataset
    partition: Partition
    client_data: list[Dataset]
    client_rngs: list[np.random.Generator]
    sampling_rng: np.random.Generator


@dataclass
class RoundState:
    round: int
    global_model: BnMlpModel
    previous_global: BnMlpModel | None
    memory: GlobalMemory
    client_models: list[BnMlpModel]
    metrics: list[MetricsRow] = field(default_factory=list)


def distribute(global_model: BnMlpModel, fingerprint_ctx: FingerprintContext | None, clients: int) -> list[BnMlpModel]:
    """A copy of the global model per client, fingerprinted when fingerprinting is on"""
    copies = []
    for client_id in range(clients):
        copy = global_model.copy()
        if fingerprint_ctx is not None and fingerprint_ctx.cfg.enabled:
            linsert(copy, fingerprint_ctx.records[client_id], fingerprint_ctx.cfg)
        copies.append(copy)
    return copies


def measure(
    round_number: int,
    global_model: BnMlpModel,
    client_models: list[BnMlpModel],
    test_set: Dataset,
    watermark_ctx: WatermarkContext | None,
    fingerprint_ctx: FingerprintContext | None,
    sampled: list[int] | None = None,
    wm_steps: int = 0,
    pre_wm_test_acc: float | None = None
) -> MetricsRow:
    """
    Test and trigger accuracy of the global model, the test accuracy of every client's copy,
    and each copy's FSS against its own record
    """
    wm_acc = trigger_accuracy(global_model, watermark_ctx.trigger) if watermark_ctx is not None else float("nan")

    if fingerprint_ctx is not None:
        client_fss = [record_fss(record, model) for record, model in zip(fingerprint_ctx.records, client_models)]
    else:
        client_fss = []

    return MetricsRow(
        round=round_number,
        test_acc=accuracy(global_model, test_set.features, test_set.labels),
        wm_acc=wm_acc,
        min_fss=min(client_fss) if client_fss else float("nan"),
        mean_fss=float(np.mean(client_fss)) if client_fss else float("nan"),
        client_fss=client_fss,
        sampled_clients=sampled or [],
        wm_steps=wm_steps,
        client_test_acc=[accuracy(model, test_set.features, test_set.labels) for model in client_models],
        pre_wm_test_acc=pre_wm_test_acc
    )


def run_round(
    state: RoundState,
    fl_config: FlConfig,
    federation: Federation,
    watermark_ctx: WatermarkContext | None,
    fingerprint_ctx: FingerprintContext | None,
    threads: int = 1
) -> RoundState:
    """
    Advance the federation by one round.

    Args:
        state (RoundState): the state after the previous round (or the initial distribution)
        fl_config (FlConfig): client count, participation, and the local training settings
        federation (Federation): client data and random streams
        watermark_ctx (WatermarkContext | None): trigger set, global memory and settings. None (or disabled) skips embedding.
        fingerprint_ctx (FingerprintContext | None): records and settings. None (or disabled) distributes plain copies.
        threads (int, optional): how many clients train at the same time

    Returns:
        RoundState: the same state object, moved on by one round
    """
    round_number = state.round + 1
    sampled = sample_clients(federation.sampling_rng, fl_config.clients, fl_config.sampled_clients).tolist()

    # Stage 1: local training and aggregation
    def train_client(client_id: int) -> BnMlpModel:
        return local_train(
            state.client_models[client_id],
            federation.client_data[client_id],
            fl_config.local_epochs,
            fl_config.client_lr,
            fl_config.batch_size,
            federation.client_rngs[client_id]
        )

    # Training happens in place, so the copies as received are kept aside first
    received = {client_id: state.client_models[client_id].get_params() for client_id in sampled}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        trained = list(pool.map(train_client, sampled))
    for client_id, model in zip(sampled, trained):
        state.client_models[client_id] = model

    if fl_config.aggregation == "updates":
        global_params = state.global_model.get_params()
        contributions = [
            apply_update(global_params, received[client_id], state.client_models[client_id]) for client_id in sampled
        ]
    else:
        contributions = [state.client_models[client_id] for client_id in sampled]

    aggregate = fedavg(models=contributions, weights=[len(federation.client_data[client_id]) for client_id in sampled])

    # Stage 2: global watermark
    steps = []
    pre_wm_test_acc = None
    if watermark_ctx is not None and watermark_ctx.cfg.enabled:
        pre_wm_test_acc = accuracy(aggregate, federation.test_set.features, federation.test_set.labels)
        gembed(
            aggregate,
            trigger=watermark_ctx.trigger,
            memory=watermark_ctx.memory,
            cfg=watermark_ctx.cfg,
            previous_global=state.global_model.get_params(),
            on_step=lambda iteration, *_: steps.append(iteration)
        )
        watermark_ctx.steps_per_round.append(len(steps))

    # Stages 3 and 4: fingerprint copies of the watermarked model and hand them out
    state.client_models = distribute(aggregate, fingerprint_ctx, clients=fl_config.clients)
    state.previous_global, state.global_model = state.global_model, aggregate
    state.round = round_number

    row = measure(
        round_number, aggregate, state.client_models, federation.test_set,
        watermark_ctx, fingerprint_ctx, sampled=sampled, wm_steps=len(steps), pre_wm_test_acc=pre_wm_test_acc
    )
    state.metrics.append(row)
    logger.debug(f"Round {round_number}: test acc {row.test_acc:.4f}, wm acc {row.wm_acc:.4f}, min FSS {row.min_fss:.4f}")
    return state


@final
class FederatedTrainer:

    def __init__(self, experiment: ExperimentConfig, threads: int | None = None, show_progress: bool = True):
        """
        Args:
            experiment (ExperimentConfig): the validated experiment configuration
            threads (int | None, optional): how many clients may train at once. Defaults to the FEDTRACKER_THREADS setting.
            show_progress (bool, optional): whether to draw a progress bar over the rounds
        """
        self.experiment = experiment
        self.threads = threads or settings.threads
        self.show_progress = show_progress

        streams = np.random.SeedSequence(experiment.seed).spawn(8)
        (
            self.data_seed, self.split_seed, self.partition_seed, self.init_seed,
            self.trigger_seed, self.keys_seed, self.sampling_seed, self.clients_seed
        ) = streams
        self.attack_seed = np.random.SeedSequence([experiment.seed, 1])

    @staticmethod
    def _as_int(seed: np.random.SeedSequence) -> int:
        return int(seed.generate_state(1)[0])

    def load_dataset(self) -> Dataset:
        data = self.experiment.data
        if data.source == "idx":
            return load_idx(data.images_path, data.labels_path)
        return synth_blobs(
            seed=self._as_int(self.data_seed), classes=data.classes, dim=data.dim, per_class=data.per_class, spread=data.spread
        )

    def build_federation(self) -> Federation:
        fl, data = self.experiment.fl, self.experiment.data
        dataset = self.load_dataset()
        train_set, test_set = split_train_test(dataset, test_fraction=data.test_fraction, seed=self._as_int(self.split_seed))

        if data.dirichlet_xi is None:
            partition = partition_iid(train_set, clients=fl.clients, seed=self._as_int(self.partition_seed))
        else:
            partition = partition_dirichlet(
                train_set, clients=fl.clients, xi=data.dirichlet_xi, seed=self._as_int(self.partition_seed)
            )

        logger.info(f"Partitioned {len(train_set)} training samples between {fl.clients} clients: {partition.sizes}")
        return Federation(
            train_set=train_set,
            test_set=test_set,
            partition=partition,
            client_data=[partition.client_data(train_set, client_id) for client_id in range(fl.clients)],
            client_rngs=[np.random.default_rng(seed) for seed in self.clients_seed.spawn(fl.clients)],
            sampling_rng=np.random.default_rng(self.sampling_seed)
        )

    def initial_model(self, input_dim: int, classes: int) -> BnMlpModel:
        model_cfg = self.experiment.model
        return BnMlpModel(
            input_dim=input_dim,
            hidden_widths=model_cfg.hidden_widths,
            classes=classes,
            seed=np.random.default_rng(self.init_seed),
            momentum=model_cfg.bn_momentum,
            epsilon=model_cfg.bn_epsilon
        ).eval()

    def generate_protection(self, input_dim: int, classes: int, gamma_size: int) -> tuple[TriggerSet, list[FingerprintRecord]]:
        """
        Create the trigger set and every client's fingerprint record. Both are made even when
        embedding is switched off, so unprotected baselines are measured the same way.
        """
        wm, fp = self.experiment.watermark, self.experiment.fingerprint
        trigger = gen_trigger_set(
            classes=classes,
            dim=input_dim,
            per_class=wm.per_class,
            noise_sigma=wm.noise_sigma,
            seed=self.trigger_seed,
            pattern_scale=wm.pattern_scale
        )
        records = gen(
            clients=self.experiment.fl.clients,
            bits=fp.bits,
            gamma_size=gamma_size,
            seed=self.keys_seed,
            ga=fp.ga,
            margin=fp.margin
        )
        return trigger, records

    def choose_adversaries(self) -> list[int]:
        clients = self.experiment.fl.clients
        count = min(self.experiment.attack_clients, clients)
        if count == 0:
            return []
        rng = np.random.default_rng(self.attack_seed)
        return sorted(rng.choice(clients, size=count, replace=False).tolist())

    def run(self) -> ExperimentReport:
        started = time.perf_counter()
        experiment = self.experiment
        fl = experiment.fl

        federation = self.build_federation()
        classes = federation.train_set.class_count
        global_model = self.initial_model(input_dim=federation.train_set.dim, classes=classes)
        trigger, records = self.generate_protection(
            input_dim=federation.train_set.dim, classes=classes, gamma_size=global_model.gamma_size
        )

        watermark_ctx = WatermarkContext(trigger=trigger, memory=GlobalMemory.zeros(global_model.layout), cfg=experiment.watermark)
        fingerprint_ctx = FingerprintContext(records=records, cfg=experiment.fingerprint)

        client_models = distribute(global_model, fingerprint_ctx, clients=fl.clients)
        state = RoundState(round=0, global_model=global_model, previous_global=None, memory=watermark_ctx.memory, client_models=client_models)
        initial_metrics = measure(0, global_model, client_models, federation.test_set, watermark_ctx, fingerprint_ctx)

        logger.info(f"Running {fl.rounds} rounds with {fl.sampled_clients} of {fl.clients} clients per round")
        for _ in tqdm(range(fl.rounds), desc="Federated rounds", disable=not self.show_progress):
            run_round(state, fl, federation, watermark_ctx, fingerprint_ctx, threads=self.threads)

        final_tr = traceability_rate(state.client_models, records)
        hd_agreement = float(np.mean([
            hd_trace(model, records).client_id == trace(model, records) for model in state.client_models
        ]))

        adversaries = self.choose_adversaries() if experiment.attacks else []
        outcomes = run_attack_sweep(
            specs=experiment.attacks,
            client_models=state.client_models,
            client_data=federation.client_data,
            adversaries=adversaries,
            trigger=trigger,
            records=records,
            test_set=federation.test_set,
            fingerprint_cfg=experiment.fingerprint,
            default_lr=fl.client_lr,
            threshold=experiment.utility_drop_threshold,
            epsilon_v=experiment.watermark.verify_threshold,
            seed=self.attack_seed,
            batch_size=fl.batch_size
        ) if experiment.attacks else []

        report = ExperimentReport(
            config=experiment,
            config_hash=experiment.config_hash(),
            initial_metrics=initial_metrics,
            rounds=state.metrics,
            final_tr=final_tr,
            hd_agreement=hd_agreement,
            adversaries=adversaries,
            attack_outcomes=outcomes,
            wall_clock_seconds=time.perf_counter() - started,
            global_model=state.global_model,
            client_models=state.client_models,
            trigger=trigger,
            records=records,
            test_set=federation.test_set,
            client_data=federation.client_data
        )
        logger.success(
            f"Finished after {fl.rounds} rounds: test acc {report.final_test_acc:.4f}, "
            f"wm acc {report.final_wm_acc:.4f}, traceability {final_tr:.2f}"
        )
        return report


def run_experiment(
    experiment: ExperimentConfig,
    protection: ProtectionConfig | None = None,
    threads: int | None = None,
    show_progress: bool = True
) -> ExperimentReport:
    """
    Run Gen once and then every round of the federation.

    Args:
        experiment (ExperimentConfig): the experiment configuration
        protection (ProtectionConfig | None, optional): overrides the watermark and fingerprint sections of the experiment when given
        threads (int | None, optional): how many clients may train at once
        show_progress (bool, optional): whether to draw a progress bar

    Returns:
        ExperimentReport: per-round metrics, tracing results, attack outcomes and the final models
    """
    if protection is not None:
        experiment = experiment.with_protection(protection)
    return FederatedTrainer(experiment, threads=threads, show_progress=show_progress).run()


def save_run_artifacts(report: ExperimentReport, output_dir: Path) -> None:
    """
    Write the metrics, the report, every checkpoint, the trigger set and the fingerprint records
    of a finished run into one directory.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    write_metrics_csv(report.rounds, output_dir / METRICS_FILE)
    write_report_json(report, output_dir / REPORT_FILE)

    save_model(output_dir / GLOBAL_CHECKPOINT, report.global_model, meta={"round": len(report.rounds)})
    for client_id, model in enumerate(report.client_models):
        save_model(output_dir / client_checkpoint_name(client_id), model, meta={"client_id": client_id})

    save_trigger_set(output_dir / TRIGGER_SAMPLES, report.trigger)
    save_records(output_dir / RECORDS_FILE, report.records)

    if report.attack_outcomes:
        write_attacks_csv(report.attack_outcomes, output_dir / ATTACKS_FILE)

    logger.success(f"Saved the run to {output_dir}")

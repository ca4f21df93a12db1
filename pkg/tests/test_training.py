import numpy as np
import pytest

from src.setup.config import ProtectionConfig, WatermarkConfig, FingerprintConfig, apply_overrides
from src.monitoring import write_metrics_csv
from src.protection.fingerprint import FingerprintContext
from src.protection.watermark import GlobalMemory, WatermarkContext
from src.training_pipeline.training import FederatedTrainer, RoundState, distribute, run_experiment, run_round


def _non_gamma(model) -> dict[str, np.ndarray]:
    return {name: array for name, array in model.state_dict().items() if not name.endswith("gamma")}


def test_fingerprinted_copies_only_differ_in_their_scales(tiny_report):
    global_state = _non_gamma(tiny_report.global_model)
    gammas = set()

    for model in tiny_report.client_models:
        for name, array in _non_gamma(model).items():
            np.testing.assert_array_equal(array, global_state[name])
        gammas.add(model.get_bn_gamma().tobytes())

    assert len(gammas) == len(tiny_report.client_models)


def test_every_round_keeps_every_client_traceable(tiny_report):
    assert len(tiny_report.rounds) == 3
    assert [row.round for row in tiny_report.rounds] == [1, 2, 3]
    assert tiny_report.initial_metrics.round == 0
    assert tiny_report.initial_metrics.min_fss >= 0.95

    for row in tiny_report.rounds:
        assert row.min_fss >= 0.95
        assert len(row.client_fss) == 3
        assert sorted(row.sampled_clients) == [0, 1, 2]

    assert tiny_report.final_tr == 1.0
    assert tiny_report.hd_agreement == 1.0


def test_client_test_accuracy_is_measured_every_round(tiny_report):
    for row in [tiny_report.initial_metrics, *tiny_report.rounds]:
        assert len(row.client_test_acc) == 3
        assert all(0.0 <= acc <= 1.0 for acc in row.client_test_acc)

    assert tiny_report.initial_metrics.pre_wm_test_acc is None
    assert all(row.pre_wm_test_acc is not None for row in tiny_report.rounds)


@pytest.mark.parametrize("aggregation", ["updates", "models"])
def test_without_protection_both_aggregations_agree_with_the_global_model(tiny_experiment, aggregation):
    experiment = apply_overrides(tiny_experiment, {"fl.aggregation": aggregation})
    report = run_experiment(experiment, protection=ProtectionConfig.unprotected(), show_progress=False)

    for row in report.rounds:
        assert row.pre_wm_test_acc is None
        assert row.client_test_acc == [row.test_acc] * 3


def test_aggregating_updates_keeps_fingerprints_out_of_the_global_model(tiny_experiment):
    protection = ProtectionConfig(watermark=WatermarkConfig(enabled=False), fingerprint=tiny_experiment.fingerprint)
    frozen_clients = {"fl.local_epochs": 0, "fl.rounds": 2}

    updates = run_experiment(
        apply_overrides(tiny_experiment, {**frozen_clients, "fl.aggregation": "updates"}), protection=protection, show_progress=False
    )
    models = run_experiment(
        apply_overrides(tiny_experiment, {**frozen_clients, "fl.aggregation": "models"}), protection=protection, show_progress=False
    )

    trainer = FederatedTrainer(tiny_experiment, threads=1, show_progress=False)
    federation = trainer.build_federation()
    initial = trainer.initial_model(input_dim=federation.train_set.dim, classes=federation.train_set.class_count)

    np.testing.assert_allclose(updates.global_model.get_bn_gamma(), initial.get_bn_gamma(), atol=1e-6)
    assert not np.allclose(models.global_model.get_bn_gamma(), initial.get_bn_gamma(), atol=1e-3)


def test_unprotected_runs_hand_out_the_plain_global_model(tiny_experiment):
    report = run_experiment(tiny_experiment, protection=ProtectionConfig.unprotected(), show_progress=False)

    global_state = report.global_model.state_dict()
    for model in report.client_models:
        for name, array in model.state_dict().items():
            np.testing.assert_array_equal(array, global_state[name])

    assert all(row.wm_steps == 0 for row in report.rounds)
    assert report.records is not None and len(report.records) == 3
    assert report.trigger is not None


def test_fingerprinting_alone_leaves_the_aggregate_unwatermarked(tiny_experiment):
    protection = ProtectionConfig(watermark=WatermarkConfig(enabled=False), fingerprint=tiny_experiment.fingerprint)
    report = run_experiment(tiny_experiment, protection=protection, show_progress=False)

    assert all(row.wm_steps == 0 for row in report.rounds)
    assert all(row.min_fss >= 0.95 for row in report.rounds)
    global_state = _non_gamma(report.global_model)
    for model in report.client_models:
        for name, array in _non_gamma(model).items():
            np.testing.assert_array_equal(array, global_state[name])


def test_runs_are_reproducible(tmp_path, tiny_experiment, tiny_report):
    again = run_experiment(tiny_experiment, threads=2, show_progress=False)

    assert [row.model_dump() for row in again.rounds] == [row.model_dump() for row in tiny_report.rounds]
    np.testing.assert_array_equal(again.global_model.get_params().values, tiny_report.global_model.get_params().values)

    write_metrics_csv(tiny_report.rounds, tmp_path / "first.csv")
    write_metrics_csv(again.rounds, tmp_path / "second.csv")
    assert (tmp_path / "first.csv").read_bytes() == (tmp_path / "second.csv").read_bytes()


def test_a_different_seed_gives_a_different_run(tiny_experiment, tiny_report):
    other = run_experiment(apply_overrides(tiny_experiment, {"seed": 1}), show_progress=False)
    assert not np.array_equal(other.global_model.get_params().values, tiny_report.global_model.get_params().values)


def test_zero_rounds_only_measure_the_initial_distribution(tiny_experiment):
    report = run_experiment(apply_overrides(tiny_experiment, {"fl.rounds": 0}), show_progress=False)

    assert report.rounds == []
    assert report.final_metrics == report.initial_metrics
    assert report.final_tr == 1.0


def test_partial_participation_samples_the_rounded_up_fraction(tiny_experiment):
    experiment = apply_overrides(tiny_experiment, {"fl.clients": 5, "fl.participation_fraction": 0.4, "fl.rounds": 2})
    report = run_experiment(experiment, show_progress=False)

    for row in report.rounds:
        assert len(row.sampled_clients) == 2
        assert len(set(row.sampled_clients)) == 2
        assert all(0 <= client_id < 5 for client_id in row.sampled_clients)


def test_the_memory_accumulates_once_per_round(tiny_experiment):
    trainer = FederatedTrainer(tiny_experiment, threads=1, show_progress=False)
    federation = trainer.build_federation()
    global_model = trainer.initial_model(input_dim=federation.train_set.dim, classes=federation.train_set.class_count)
    trigger, records = trainer.generate_protection(
        input_dim=federation.train_set.dim, classes=federation.train_set.class_count, gamma_size=global_model.gamma_size
    )

    watermark_ctx = WatermarkContext(trigger=trigger, memory=GlobalMemory.zeros(global_model.layout), cfg=tiny_experiment.watermark)
    fingerprint_ctx = FingerprintContext(records=records, cfg=tiny_experiment.fingerprint)
    state = RoundState(
        round=0,
        global_model=global_model,
        previous_global=None,
        memory=watermark_ctx.memory,
        client_models=distribute(global_model, fingerprint_ctx, clients=3)
    )

    first_global = global_model
    run_round(state, tiny_experiment.fl, federation, watermark_ctx, fingerprint_ctx)
    run_round(state, tiny_experiment.fl, federation, watermark_ctx, fingerprint_ctx)

    assert state.round == 2
    assert state.memory.rounds_accumulated == 2
    assert len(watermark_ctx.steps_per_round) == 2
    assert state.previous_global is not first_global
    assert np.linalg.norm(state.memory.m.values) > 0


def test_distribute_without_fingerprints_copies_the_model(small_model):
    copies = distribute(small_model, None, clients=2)
    assert len(copies) == 2
    assert copies[0] is not small_model and copies[0] is not copies[1]
    np.testing.assert_array_equal(copies[1].get_params().values, small_model.get_params().values)

    disabled = FingerprintContext(records=[], cfg=FingerprintConfig(enabled=False))
    assert len(distribute(small_model, disabled, clients=3)) == 3


@pytest.mark.parametrize("count", [0, 2, 10])
def test_adversaries_are_distinct_clients(tiny_experiment, count):
    trainer = FederatedTrainer(tiny_experiment.model_copy(update={"attack_clients": count}), show_progress=False)
    adversaries = trainer.choose_adversaries()

    assert len(adversaries) == min(count, 3)
    assert adversaries == sorted(set(adversaries))
    assert adversaries == trainer.choose_adversaries()

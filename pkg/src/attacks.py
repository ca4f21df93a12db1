"""
Attacks that try to strip the watermark or the fingerprint from a leaked client model,
and the bookkeeping that decides whether the protection survived.

An attack counts as defeated in two ways:

    Case 1: the watermark still verifies and tracing still names the adversary.
    Case 2: verification or tracing fails, but the model lost more than `utility_drop_threshold`
            of its test accuracy, so the stolen copy is no longer worth much.

Anything else is a successful removal ("broken").

Attack specs are short strings:

    identity
    finetune:<epochs>[:<lr>]
    prune:<rate>:<bn|no_bn>
    quantize:<f32|f16|i8>
    overwrite[:<seed>]
"""
import math
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from src.setup.config import FingerprintConfig
from src.setup.exceptions import ConfigError, UnknownAttackError
from src.feature_pipeline.data_sourcing import Dataset
from src.protection.fingerprint import (
    FingerprintRecord, fss_vector, linsert, record_fss, trace
)
from src.protection.watermark import TriggerSet, trigger_accuracy, verify
from src.training_pipeline.federation import local_train
from src.training_pipeline.models import BnMlpModel, accuracy


ATTACK_NAMES = ["identity", "finetune", "prune", "quantize", "overwrite"]
Verdict = Literal["robust_case1", "robust_case2", "broken"]


class AttackOutcome(BaseModel):
    attack_name: str
    setting: str
    adversary_id: int
    test_acc_before: float
    test_acc_after: float
    wm_acc_before: float
    wm_acc_after: float
    fss_before: list[float]
    fss_after: list[float]
    traced_id_before: int
    traced_id_after: int
    verified_after: bool
    verdict: Verdict

    def to_row(self) -> dict[str, Any]:
        """A flat row for the attack tables; only the adversary's own FSS is kept"""
        row = self.model_dump(exclude={"fss_before", "fss_after"})
        row["adv_fss_before"] = self.fss_before[self.adversary_id]
        row["adv_fss_after"] = self.fss_after[self.adversary_id]
        return row


@dataclass
class AttackSpec:
    name: str
    setting: str
    params: dict[str, Any] = field(default_factory=dict)


def _number(value: str, spec: str, kind: type) -> Any:
    try:
        return kind(value)
    except ValueError as error:
        raise ConfigError(f"'{value}' in attack spec '{spec}' is not a valid {kind.__name__}") from error


def parse_attack_spec(spec: str) -> AttackSpec:
    """
    Turn an attack string like "prune:0.3:no_bn" into an AttackSpec.

    Raises:
        UnknownAttackError: if the attack name is not one of ATTACK_NAMES.
        ConfigError: if the parameters are missing or malformed.
    """
    name, *parts = spec.strip().split(":")
    name = name.lower()
    setting = ":".join(parts)

    if name not in ATTACK_NAMES:
        raise UnknownAttackError(name=name, valid_names=ATTACK_NAMES)

    if name == "identity":
        if parts:
            raise ConfigError("The identity attack takes no parameters")
        return AttackSpec(name=name, setting="")

    if name == "finetune":
        if not 1 <= len(parts) <= 2:
            raise ConfigError("Use finetune:<epochs>[:<lr>]")
        epochs = _number(parts[0], spec, int)
        lr = _number(parts[1], spec, float) if len(parts) == 2 else None
        if epochs < 0 or (lr is not None and lr <= 0):
            raise ConfigError(f"Fine-tuning needs a non-negative epoch count and a positive learning rate: '{spec}'")
        return AttackSpec(name=name, setting=setting, params={"epochs": epochs, "lr": lr})

    if name == "prune":
        if len(parts) != 2 or parts[1] not in ("bn", "no_bn"):
            raise ConfigError("Use prune:<rate>:<bn|no_bn>")
        rate = _number(parts[0], spec, float)
        if not 0 <= rate < 1:
            raise ConfigError(f"The pruning rate must lie in [0, 1): '{spec}'")
        return AttackSpec(name=name, setting=setting, params={"rate": rate, "include_bn": parts[1] == "bn"})

    if name == "quantize":
        if len(parts) != 1 or parts[0] not in ("f32", "f16", "i8"):
            raise ConfigError("Use quantize:<f32|f16|i8>")
        return AttackSpec(name=name, setting=setting, params={"dtype": parts[0]})

    if len(parts) > 1:
        raise ConfigError("Use overwrite[:<seed>]")
    seed = _number(parts[0], spec, int) if parts else 0
    return AttackSpec(name=name, setting=setting, params={"seed": seed})


def finetune_attack(
    model: BnMlpModel,
    adv_data: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32
) -> BnMlpModel:
    """Plain SGD on the adversary's own shard, with every batch norm layer trainable"""
    if len(adv_data) == 0:
        raise ValueError("The adversary needs data to fine-tune on")

    attacked = model.copy()
    attacked.freeze_bn(False)
    return local_train(attacked, adv_data, epochs=epochs, lr=lr, batch_size=batch_size, rng=rng)


def finetune_curve(
    model: BnMlpModel,
    adv_data: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    trigger: TriggerSet,
    records: list[FingerprintRecord],
    adversary_id: int,
    test_set: Dataset,
    batch_size: int = 32
) -> pd.DataFrame:
    """
    Fine-tune one epoch at a time and record how the protection holds up after each one.

    Returns:
        pd.DataFrame: one row per epoch (epoch 0 is the untouched model) with test accuracy,
                      trigger accuracy, the adversary's FSS and the traced client
    """
    attacked = model.copy()
    attacked.freeze_bn(False)
    rows = []

    for epoch in range(epochs + 1):
        if epoch > 0:
            local_train(attacked, adv_data, epochs=1, lr=lr, batch_size=batch_size, rng=rng)

        rows.append({
            "epoch": epoch,
            "test_acc": accuracy(attacked, test_set.features, test_set.labels),
            "wm_acc": trigger_accuracy(attacked, trigger),
            "adv_fss": record_fss(records[adversary_id], attacked),
            "traced_id": trace(attacked, records),
        })

    return pd.DataFrame(rows)


def prune_attack(model: BnMlpModel, rate: float, include_bn: bool) -> BnMlpModel:
    """
    Zero the floor(rate * count) smallest-magnitude entries under one global threshold.
    Without include_bn the candidates are all dense weights (biases and BN parameters are
    exempt); with it, only the BN scales are pruned.
    """
    if not 0 <= rate < 1:
        raise ValueError("The pruning rate must lie in [0, 1)")

    attacked = model.copy()
    if include_bn:
        targets = [layer.gamma for layer in attacked.bn_layers]
    else:
        targets = [layer.weight for layer in attacked.dense_layers]

    magnitudes = np.concatenate([np.abs(target).ravel() for target in targets])
    count = math.floor(rate * magnitudes.size)
    if count == 0:
        return attacked

    pruned = np.zeros(magnitudes.size, dtype=bool)
    pruned[np.argsort(magnitudes, kind="stable")[:count]] = True

    offset = 0
    for target in targets:
        mask = pruned[offset: offset + target.size].reshape(target.shape)
        target[mask] = 0
        offset += target.size

    logger.debug(f"Pruned {count} of {magnitudes.size} {'BN scales' if include_bn else 'dense weights'}")
    return attacked


def _quantize_int8(values: np.ndarray) -> np.ndarray:
    scale = float(np.abs(values).max()) / 127 if values.size else 0.0
    if scale == 0:
        return values.copy()
    levels = np.clip(np.rint(values / scale), -127, 127)
    return (levels * scale).astype(values.dtype)


def quantize_attack(model: BnMlpModel, dtype: Literal["f32", "f16", "i8"]) -> BnMlpModel:
    """
    Simulate storing the trainable parameters at lower precision and reading them back as
    float32. int8 uses symmetric per-tensor quantisation (scale = max|w| / 127).
    """
    attacked = model.copy()
    if dtype == "f32":
        return attacked

    quantized = {}
    for name, values in attacked.named_parameters().items():
        if dtype == "f16":
            quantized[name] = values.astype(np.float16).astype(values.dtype)
        elif dtype == "i8":
            quantized[name] = _quantize_int8(values)
        else:
            raise ValueError(f"Unknown precision '{dtype}'")

    attacked.load_state_dict({**quantized, **attacked.named_buffers()})
    return attacked


def make_attacker_record(bits: int, gamma_size: int, delta: float, seed: int) -> FingerprintRecord:
    """A fresh random code and Gaussian key, as an adversary would make for themselves"""
    rng = np.random.default_rng(seed)
    code = rng.choice(np.array([-1, 1], dtype=np.int8), size=bits)
    key = rng.standard_normal((gamma_size, bits)).astype(np.float32)
    return FingerprintRecord(client_id=-1, code=code, key=key, delta=delta)


def overwrite_attack(
    model: BnMlpModel,
    bits: int,
    delta: float,
    lr: float,
    seed: int,
    cfg: FingerprintConfig | None = None
) -> BnMlpModel:
    """Insert the attacker's own fingerprint with the same insertion procedure the server uses"""
    cfg = (cfg or FingerprintConfig()).model_copy(update={"lr": lr, "margin": delta, "bits": bits})
    attacker = make_attacker_record(bits=bits, gamma_size=model.gamma_size, delta=delta, seed=seed)
    return linsert(model.copy(), attacker, cfg)


def decide_verdict(verified: bool, traced_id: int, adversary_id: int, accuracy_drop: float, threshold: float) -> Verdict:
    if verified and traced_id == adversary_id:
        return "robust_case1"
    if accuracy_drop > threshold:
        return "robust_case2"
    return "broken"


def evaluate_attack(
    before: BnMlpModel,
    after: BnMlpModel,
    trigger: TriggerSet,
    records: list[FingerprintRecord],
    adversary_id: int,
    threshold: float,
    test_set: Dataset,
    epsilon_v: float = 0.5,
    attack_name: str = "identity",
    setting: str = ""
) -> AttackOutcome:
    """
    Measure a model before and after an attack and classify the result.

    Args:
        before (BnMlpModel): the adversary's model as distributed
        after (BnMlpModel): the attacked model
        trigger (TriggerSet): the global watermark trigger set
        records (list[FingerprintRecord]): every client's fingerprint record
        adversary_id (int): the client that leaked the model
        threshold (float): the test-accuracy drop beyond which a model counts as ruined
        test_set (Dataset): the server's held-out data
        epsilon_v (float, optional): the verification threshold
        attack_name (str, optional): recorded in the outcome
        setting (str, optional): recorded in the outcome

    Returns:
        AttackOutcome: the metrics and the verdict
    """
    if not any(record.client_id == adversary_id for record in records):
        raise ValueError(f"There is no client {adversary_id} among the fingerprint records")

    test_acc_before = accuracy(before, test_set.features, test_set.labels)
    test_acc_after = accuracy(after, test_set.features, test_set.labels)
    verified = verify(after, trigger, epsilon_v=epsilon_v)
    traced_after = trace(after, records)

    verdict = decide_verdict(
        verified=verified,
        traced_id=traced_after,
        adversary_id=adversary_id,
        accuracy_drop=test_acc_before - test_acc_after,
        threshold=threshold
    )

    return AttackOutcome(
        attack_name=attack_name,
        setting=setting,
        adversary_id=adversary_id,
        test_acc_before=test_acc_before,
        test_acc_after=test_acc_after,
        wm_acc_before=trigger_accuracy(before, trigger),
        wm_acc_after=trigger_accuracy(after, trigger),
        fss_before=fss_vector(before, records).tolist(),
        fss_after=fss_vector(after, records).tolist(),
        traced_id_before=trace(before, records),
        traced_id_after=traced_after,
        verified_after=verified,
        verdict=verdict
    )


def apply_attack(
    spec: AttackSpec,
    model: BnMlpModel,
    adv_data: Dataset,
    rng: np.random.Generator,
    fingerprint_cfg: FingerprintConfig,
    default_lr: float,
    batch_size: int = 32
) -> BnMlpModel:
    if spec.name == "identity":
        return model.copy()
    if spec.name == "finetune":
        lr = spec.params["lr"] or default_lr
        return finetune_attack(model, adv_data, epochs=spec.params["epochs"], lr=lr, rng=rng, batch_size=batch_size)
    if spec.name == "prune":
        return prune_attack(model, rate=spec.params["rate"], include_bn=spec.params["include_bn"])
    if spec.name == "quantize":
        return quantize_attack(model, dtype=spec.params["dtype"])
    return overwrite_attack(
        model,
        bits=fingerprint_cfg.bits,
        delta=fingerprint_cfg.margin,
        lr=fingerprint_cfg.lr,
        seed=spec.params["seed"],
        cfg=fingerprint_cfg
    )


def run_attack_sweep(
    specs: list[str],
    client_models: list[BnMlpModel],
    client_data: list[Dataset],
    adversaries: list[int],
    trigger: TriggerSet,
    records: list[FingerprintRecord],
    test_set: Dataset,
    fingerprint_cfg: FingerprintConfig,
    default_lr: float,
    threshold: float,
    epsilon_v: float,
    seed: np.random.SeedSequence | int,
    batch_size: int = 32
) -> list[AttackOutcome]:
    """
    Run every attack spec against every adversary's model. Each (attack, adversary) pair gets
    its own random stream, so adding an attack never changes the others' results.
    """
    parsed = [parse_attack_spec(spec) for spec in specs]
    seed_sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = seed_sequence.spawn(len(parsed) * max(len(adversaries), 1))

    outcomes = []
    for spec_index, spec in enumerate(parsed):
        for adv_index, adversary_id in enumerate(adversaries):
            rng = np.random.default_rng(streams[spec_index * len(adversaries) + adv_index])
            before = client_models[adversary_id]
            after = apply_attack(
                spec, before, client_data[adversary_id], rng=rng,
                fingerprint_cfg=fingerprint_cfg, default_lr=default_lr, batch_size=batch_size
            )

            outcome = evaluate_attack(
                before, after, trigger, records, adversary_id=adversary_id, threshold=threshold,
                test_set=test_set, epsilon_v=epsilon_v, attack_name=spec.name, setting=spec.setting
            )
            logger.info(f"{spec.name}:{spec.setting} on client {adversary_id} -> {outcome.verdict}")
            outcomes.append(outcome)

    return outcomes

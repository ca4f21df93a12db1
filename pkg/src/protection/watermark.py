"""
The server's global watermark: a trigger set of out-of-distribution patterns with
assigned labels, embedded into every aggregated model without undoing what the federation
has learned so far.

To protect the main task, every watermark gradient is projected so that it never points
against the global memory, the accumulated direction of the federation's own updates:

    g_tilde = g - (<g, m> / <m, m>) * m     whenever <g, m> < 0

Batch norm layers are frozen while the trigger set is learned, which keeps the OOD
samples from dragging the running statistics (and the client fingerprints that live in
the BN scales) around.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from loguru import logger

from src.setup.config import WatermarkConfig
from src.setup.exceptions import DataFormatError, LayoutMismatchError, ShapeMismatchError
from src.training_pipeline.checkpoints import load_tensors, save_tensors
from src.training_pipeline.models import BnMlpModel, accuracy, backward, sgd_step
from src.training_pipeline.params import Layout, ParamVector


PROJECTION_TOLERANCE = 1e-6


@dataclass
class TriggerSet:
    samples: np.ndarray
    labels: np.ndarray
    per_class_count: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.size:
            raise ShapeMismatchError("The trigger set needs one label per sample")

        _, counts = np.unique(self.labels, return_counts=True)
        if np.any(counts != self.per_class_count):
            raise ShapeMismatchError(f"Every trigger class must hold exactly {self.per_class_count} samples")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def classes(self) -> int:
        return int(np.unique(self.labels).size)


@dataclass
class GlobalMemory:
    m: ParamVector
    rounds_accumulated: int = 0

    @classmethod
    def zeros(cls, layout: Layout) -> "GlobalMemory":
        total = sum(entry.length for entry in layout)
        return cls(m=ParamVector(values=np.zeros(total, dtype=np.float64), layout=layout))


@dataclass
class WatermarkContext:
    trigger: TriggerSet
    memory: GlobalMemory
    cfg: WatermarkConfig
    steps_per_round: list[int] = field(default_factory=list)


def gen_trigger_set(
    classes: int,
    dim: int,
    per_class: int,
    noise_sigma: float,
    seed: int | np.random.SeedSequence,
    pattern_scale: float = 4.0
) -> TriggerSet:
    """
    One uniform noise pattern per class on [-pattern_scale, pattern_scale]^dim, and
    per_class noisy copies of it (Gaussian noise of standard deviation noise_sigma), each
    labelled with its pattern's class.
    """
    if per_class < 1:
        raise ValueError("Each trigger class needs at least one sample")
    if noise_sigma < 0:
        raise ValueError("The trigger noise cannot be negative")

    rng = np.random.default_rng(seed)
    patterns = rng.uniform(-pattern_scale, pattern_scale, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    samples = patterns[labels] + noise_sigma * rng.standard_normal((labels.size, dim))
    return TriggerSet(samples=samples, labels=labels, per_class_count=per_class)


def update_memory(
    memory: GlobalMemory,
    previous_global: ParamVector,
    new_global: ParamVector,
    mode: Literal["sum", "average"] = "sum"
) -> GlobalMemory:
    """
    Fold the latest global update into the memory.

    The stored direction is previous - new, i.e. the positive (descent-producing) gradient
    direction of the main task. "sum" keeps a running total; "average" uses the recurrence
    m_t = m_{t-1} / t + (t - 1) / t * (previous - new).

    Raises:
        LayoutMismatchError: if the three vectors do not share one layout.
    """
    memory.m.check_compatible(previous_global)
    memory.m.check_compatible(new_global)

    delta = previous_global.values.astype(np.float64) - new_global.values.astype(np.float64)
    t = memory.rounds_accumulated + 1

    if mode == "sum":
        values = memory.m.values + delta
    elif mode == "average":
        values = memory.m.values / t + (t - 1) / t * delta
    else:
        raise ValueError(f"Unknown memory mode '{mode}'")

    memory.m = ParamVector(values=values, layout=memory.m.layout)
    memory.rounds_accumulated = t
    return memory


def project_gradient(g: ParamVector, m: ParamVector) -> ParamVector:
    """
    The closest point to g that does not conflict with the memory, i.e. the solution of

        minimise ||g - g_tilde||^2   subject to   <g_tilde, m> >= 0

    A single linear constraint has a closed-form answer, so no solver is needed. The
    result keeps g's dtype; the arithmetic is done in float64.
    """
    g.check_compatible(m)
    g_values = g.values.astype(np.float64)
    m_values = m.values.astype(np.float64)

    m_squared = float(np.dot(m_values, m_values))
    g_dot_m = float(np.dot(g_values, m_values))
    if m_squared == 0 or g_dot_m >= 0:
        return g.copy()

    projected = g_values - (g_dot_m / m_squared) * m_values

    # Cancellation can leave a residue just below zero; one more pass removes it.
    residue = float(np.dot(projected, m_values))
    if residue < -PROJECTION_TOLERANCE * np.linalg.norm(projected) * np.sqrt(m_squared):
        projected = projected - (residue / m_squared) * m_values

    return ParamVector(values=projected.astype(g.dtype), layout=g.layout)


def without_batch_norm(vector: ParamVector) -> ParamVector:
    """A copy of the vector with every BN scale and shift entry set to zero"""
    values = vector.values.copy()
    for entry in vector.layout:
        if entry.name.startswith("bn"):
            values[entry.offset: entry.offset + entry.length] = 0
    return ParamVector(values=values, layout=vector.layout)


def trigger_accuracy(model: BnMlpModel, trigger: TriggerSet) -> float:
    return accuracy(model, trigger.samples, trigger.labels)


def gembed(
    model: BnMlpModel,
    trigger: TriggerSet,
    memory: GlobalMemory,
    cfg: WatermarkConfig,
    previous_global: ParamVector | None = None,
    on_step: Callable[[int, ParamVector, ParamVector], None] | None = None
) -> BnMlpModel:
    """
    Embed the global watermark into the aggregated model (in place).

    Args:
        model (BnMlpModel): the aggregate of this round.
        trigger (TriggerSet): the trigger set to learn.
        memory (GlobalMemory): the global memory. Its layout must match the model's.
        cfg (WatermarkConfig): learning rate, stopping threshold, iteration cap and ablation switches.
        previous_global (ParamVector | None, optional): when given, the memory is first updated
            with previous_global - model, so that it includes this round's aggregation.
        on_step (Callable | None, optional): called with (iteration, raw gradient, applied gradient)
            before every step.

    Returns:
        BnMlpModel: the watermarked model, in eval mode.
    """
    params = model.get_params()
    if params.layout != memory.m.layout:
        raise LayoutMismatchError("The global memory does not match the model's layout")

    if previous_global is not None:
        update_memory(memory, previous_global=previous_global, new_global=params, mode=cfg.memory_mode)

    frozen_before = model.bn_frozen
    constraint = memory.m
    if cfg.freeze_bn:
        model.freeze_bn(True)
        # Frozen coordinates cannot move, so they take no part in the projection either
        constraint = without_batch_norm(memory.m)
    model.train()

    steps = 0
    try:
        while steps < cfg.max_iter and trigger_accuracy(model, trigger) <= cfg.acc_threshold:
            _, grads = backward(model, trigger.samples, trigger.labels)
            if cfg.freeze_bn:
                grads = without_batch_norm(grads)
            applied = project_gradient(grads, constraint) if cfg.projection else grads

            if on_step is not None:
                on_step(steps, grads, applied)

            sgd_step(model, applied, lr=cfg.lr)
            steps += 1
    finally:
        for layer, frozen in zip(model.bn_layers, frozen_before):
            layer.frozen = frozen
        model.eval()

    if steps == cfg.max_iter and cfg.max_iter > 0 and trigger_accuracy(model, trigger) <= cfg.acc_threshold:
        logger.warning(
            f"Watermark embedding stopped after {steps} iterations at a trigger accuracy of "
            f"{trigger_accuracy(model, trigger):.3f}"
        )
    else:
        logger.debug(f"Watermark embedded in {steps} iterations")

    return model


def verify(model: BnMlpModel, trigger: TriggerSet, epsilon_v: float) -> bool:
    """Ownership holds when the trigger accuracy reaches the verification threshold"""
    return trigger_accuracy(model, trigger) >= epsilon_v


def trigger_labels_path(samples_path: Path) -> Path:
    return Path(samples_path).with_suffix(".json")


def save_trigger_set(samples_path: Path, trigger: TriggerSet) -> None:
    """The samples go into a .ftck file and the labels into a JSON file with the same stem"""
    save_tensors(samples_path, tensors={"samples": trigger.samples}, meta={"per_class_count": trigger.per_class_count})
    payload = {"labels": trigger.labels.tolist(), "per_class_count": trigger.per_class_count}
    trigger_labels_path(samples_path).write_text(json.dumps(payload), encoding="utf-8")


def load_trigger_set(samples_path: Path) -> TriggerSet:
    tensors, _ = load_tensors(samples_path)
    labels_path = trigger_labels_path(samples_path)

    try:
        payload = json.loads(labels_path.read_text(encoding="utf-8"))
        return TriggerSet(
            samples=tensors["samples"], labels=np.asarray(payload["labels"]), per_class_count=int(payload["per_class_count"])
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
        raise DataFormatError(f"The trigger set at {samples_path} is unreadable: {error}") from error

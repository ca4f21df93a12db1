"""
The client-side and aggregation primitives of a federated round.
"""
import numpy as np
from loguru import logger

from src.setup.exceptions import LayoutMismatchError
from src.feature_pipeline.data_sourcing import Dataset
from src.training_pipeline.models import BnMlpModel, backward, sgd_step
from src.training_pipeline.params import ParamVector


def local_train(
    model: BnMlpModel,
    client_data: Dataset,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator
) -> BnMlpModel:
    """
    Mini-batch SGD on one client's data. The model is updated in place and returned.

    Batches are drawn from a fresh permutation every epoch. A trailing batch with a single
    sample is skipped because batch statistics are undefined for it.

    Args:
        model (BnMlpModel): the client's current model
        client_data (Dataset): the client's local dataset (non-empty)
        epochs (int): the number of passes over the data; 0 leaves the model untouched
        lr (float): the client learning rate; 0 leaves the model untouched
        batch_size (int): the number of samples per step
        rng (np.random.Generator): the client's own random stream, which fixes the batch order

    Returns:
        BnMlpModel: the trained model (in eval mode)
    """
    if len(client_data) == 0:
        raise ValueError("A client cannot train without data")
    if epochs < 0 or lr < 0:
        raise ValueError("Epochs and learning rate cannot be negative")
    if epochs == 0 or lr == 0:
        return model

    if len(client_data) < 2:
        logger.warning("This client holds a single sample, which is too few for a batch-norm training step")
        return model

    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(client_data))
        for start in range(0, order.size, batch_size):
            batch_indices = order[start: start + batch_size]
            if batch_indices.size < 2:
                continue

            _, grads = backward(model, client_data.features[batch_indices], client_data.labels[batch_indices])
            sgd_step(model, grads, lr=lr)

    return model.eval()


def fedavg(models: list[BnMlpModel], weights: list[float]) -> BnMlpModel:
    """
    Weighted parameter average, with weights normalised to sum to one. Running statistics
    are averaged the same way. Accumulation happens in float64 and always in the order the
    models are given.

    Raises:
        LayoutMismatchError: if the models do not share a layout.
        ValueError: for an empty model list, a negative weight, or a zero total weight.
    """
    if not models:
        raise ValueError("There is nothing to aggregate")
    if len(models) != len(weights):
        raise ValueError("Every model needs exactly one weight")

    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("Aggregation weights cannot be negative")

    total = float(weights.sum())
    if total <= 0:
        raise ValueError("The aggregation weights sum to zero")

    reference = models[0]
    params = reference.get_params()
    buffers = reference.get_buffers()
    params_sum = np.zeros(len(params), dtype=np.float64)
    buffers_sum = np.zeros(len(buffers), dtype=np.float64)

    for model, weight in zip(models, weights):
        if model.architecture() != reference.architecture():
            raise LayoutMismatchError("Only models with the same architecture can be averaged")

        model_params = model.get_params()
        model_params.check_compatible(params)
        params_sum += weight * model_params.values.astype(np.float64)
        buffers_sum += weight * model.get_buffers().values.astype(np.float64)

    aggregate = reference.copy()
    aggregate.set_params(ParamVector(values=(params_sum / total).astype(reference.dtype), layout=params.layout))
    aggregate.set_buffers(ParamVector(values=(buffers_sum / total).astype(reference.dtype), layout=buffers.layout))
    return aggregate.eval()


def sample_clients(rng: np.random.Generator, clients: int, count: int) -> np.ndarray:
    """Choose `count` distinct clients, returned in increasing order"""
    if not 1 <= count <= clients:
        raise ValueError(f"Cannot sample {count} out of {clients} clients")
    return np.sort(rng.choice(clients, size=count, replace=False))


def apply_update(global_params: ParamVector, received: ParamVector, trained: BnMlpModel) -> BnMlpModel:
    """
    A copy of the trained client model carrying the client's update on top of the global
    parameters, i.e. global + (trained - received). Whatever the server added to the
    client's copy before handing it out is left out of what gets aggregated. Buffers are
    kept as trained.

    Raises:
        LayoutMismatchError: if the three parameter vectors do not share a layout.
    """
    trained_params = trained.get_params()
    global_params.check_compatible(received)
    global_params.check_compatible(trained_params)

    values = (
        global_params.values.astype(np.float64)
        + trained_params.values.astype(np.float64)
        - received.values.astype(np.float64)
    )
    update = trained.copy()
    update.set_params(ParamVector(values=values.astype(trained.dtype), layout=trained_params.layout))
    return update.eval()

"""
A small, numpy-only neural network engine: dense layers, batch normalisation, ReLU and a
softmax cross-entropy head, trained with plain SGD.

The protection scheme only ever touches flat parameter vectors and the batch-norm scale
vector W^gamma, so a stack of Dense -> BatchNorm -> ReLU blocks is all the simulator needs.

Parameter naming (and therefore the order of every ParamVector) is fixed:

    dense0.weight, dense0.bias, bn0.gamma, bn0.beta, dense1.weight, ..., denseL.weight, denseL.bias

W^gamma is bn0.gamma followed by bn1.gamma and so on, each in index order.
"""
import copy
from typing import Literal

import numpy as np
from sklearn.metrics import accuracy_score

from src.setup.exceptions import (
    BatchSizeError, LabelRangeError, LayoutMismatchError, NonFiniteError, ShapeMismatchError
)
from src.training_pipeline.params import ParamVector, make_layout


Mode = Literal["train", "eval"]


class DenseLayer:

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype: type = np.float32):
        """
        He-initialised affine layer computing x @ W.T + b.

        Args:
            in_features (int): the width of the incoming activations
            out_features (int): the number of units
            rng (np.random.Generator): the generator that draws the initial weights
            dtype (type, optional): the floating point type of the parameters
        """
        scale = np.sqrt(2.0 / in_features)
        self.weight: np.ndarray = (rng.standard_normal((out_features, in_features)) * scale).astype(dtype)
        self.bias: np.ndarray = np.zeros(out_features, dtype=dtype)

        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._inputs: np.ndarray | None = None

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if cache:
            self._inputs = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weight = (grad_out.T @ self._inputs).astype(self.weight.dtype)
        self.grad_bias = grad_out.sum(axis=0).astype(self.bias.dtype)
        return grad_out @ self.weight


class BatchNormLayer:

    def __init__(self, width: int, momentum: float = 0.9, epsilon: float = 1e-5, dtype: type = np.float32):
        if epsilon <= 0:
            raise ValueError("The batch norm epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("The batch norm momentum must lie in (0, 1)")

        self.momentum = momentum
        self.epsilon = epsilon
        self.frozen = False

        self.gamma: np.ndarray = np.ones(width, dtype=dtype)
        self.beta: np.ndarray = np.zeros(width, dtype=dtype)
        self.running_mean: np.ndarray = np.zeros(width, dtype=dtype)
        self.running_var: np.ndarray = np.ones(width, dtype=dtype)

        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self._cache: tuple[np.ndarray, np.ndarray, bool] | None = None

    def uses_batch_statistics(self, training: bool) -> bool:
        return training and not self.frozen

    def forward(self, x: np.ndarray, training: bool, cache: bool = True) -> np.ndarray:
        dtype = self.gamma.dtype

        if self.uses_batch_statistics(training):
            mean = x.mean(axis=0)
            var = x.var(axis=0)  # biased, for normalisation and for the running estimate alike
            self.running_mean = (self.momentum * self.running_mean + (1 - self.momentum) * mean).astype(dtype)
            self.running_var = (self.momentum * self.running_var + (1 - self.momentum) * var).astype(dtype)
        else:
            mean, var = self.running_mean, self.running_var

        inv_std = (1.0 / np.sqrt(var + self.epsilon)).astype(dtype)
        x_hat = (x - mean) * inv_std
        if cache:
            self._cache = (x_hat, inv_std, self.uses_batch_statistics(training))

        return self.gamma * x_hat + self.beta

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_hat, inv_std, batch_statistics = self._cache

        if self.frozen:
            self.grad_gamma = np.zeros_like(self.gamma)
            self.grad_beta = np.zeros_like(self.beta)
        else:
            self.grad_gamma = (grad_out * x_hat).sum(axis=0).astype(self.gamma.dtype)
            self.grad_beta = grad_out.sum(axis=0).astype(self.beta.dtype)

        grad_x_hat = grad_out * self.gamma
        if not batch_statistics:
            return grad_x_hat * inv_std

        rows = grad_out.shape[0]
        return (inv_std / rows) * (
            rows * grad_x_hat
            - grad_x_hat.sum(axis=0)
            - x_hat * (grad_x_hat * x_hat).sum(axis=0)
        )


class ReLU:

    def __init__(self):
        self._mask: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray | None:
        return self._mask

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        mask = x > 0
        if cache:
            self._mask = mask
        return x * mask

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class BnMlpModel:

    def __init__(
        self,
        input_dim: int,
        hidden_widths: list[int],
        classes: int,
        seed: int | np.random.Generator = 0,
        momentum: float = 0.9,
        epsilon: float = 1e-5,
        dtype: type = np.float32
    ):
        """
        Args:
            input_dim (int): the number of features of each sample.
            hidden_widths (list[int]): the width of every Dense -> BatchNorm -> ReLU block.
            classes (int): the number of output classes.
            seed (int | np.random.Generator, optional): an integer seed or a ready numpy Generator for the weight initialisation.
            momentum (float, optional): the batch norm running-statistics momentum.
            epsilon (float, optional): the batch norm epsilon.
            dtype (type, optional): np.float32 for simulation, np.float64 for gradient checks.
        """
        if classes < 2:
            raise ValueError("A classifier needs at least two classes")

        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.input_dim = input_dim
        self.hidden_widths = list(hidden_widths)
        self.classes = classes
        self.momentum = momentum
        self.epsilon = epsilon
        self.dtype = np.dtype(dtype)
        self.mode: Mode = "train"

        self.dense_layers: list[DenseLayer] = []
        self.bn_layers: list[BatchNormLayer] = []
        self.activations: list[ReLU] = []

        widths = [input_dim] + self.hidden_widths
        for index, width in enumerate(self.hidden_widths):
            self.dense_layers.append(DenseLayer(widths[index], width, rng=rng, dtype=dtype))
            self.bn_layers.append(BatchNormLayer(width, momentum=momentum, epsilon=epsilon, dtype=dtype))
            self.activations.append(ReLU())

        self.dense_layers.append(DenseLayer(widths[-1], classes, rng=rng, dtype=dtype))

    # Modes

    def train(self) -> "BnMlpModel":
        self.mode = "train"
        return self

    def eval(self) -> "BnMlpModel":
        self.mode = "eval"
        return self

    def freeze_bn(self, frozen: bool = True) -> None:
        for layer in self.bn_layers:
            layer.frozen = frozen

    @property
    def bn_frozen(self) -> list[bool]:
        return [layer.frozen for layer in self.bn_layers]

    # Computation

    def _run(self, x: np.ndarray, training: bool, cache: bool) -> np.ndarray:
        out = x
        for dense, bn, relu in zip(self.dense_layers, self.bn_layers, self.activations):
            out = dense.forward(out, cache=cache)
            out = bn.forward(out, training=training, cache=cache)
            out = relu.forward(out, cache=cache)
        return self.dense_layers[-1].forward(out, cache=cache)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self._run(batch, training=self.mode == "train", cache=True)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Eval-mode logits. Nothing is cached and no running statistic moves."""
        batch = self.check_batch(batch, training=False)
        logits = self._run(batch, training=False, cache=False)
        _raise_if_not_finite(logits, what="logits")
        return logits

    def backward_from_logits(self, grad_logits: np.ndarray) -> None:
        grad = self.dense_layers[-1].backward(grad_logits)
        for dense, bn, relu in reversed(list(zip(self.dense_layers, self.bn_layers, self.activations))):
            grad = relu.backward(grad)
            grad = bn.backward(grad)
            grad = dense.backward(grad)

    def check_batch(self, batch: np.ndarray, training: bool) -> np.ndarray:
        batch = np.asarray(batch, dtype=self.dtype)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"Expected a batch with {self.input_dim} columns, got shape {batch.shape}")
        if training and batch.shape[0] < 2:
            raise BatchSizeError("Train-mode forward passes need at least two samples")
        return batch

    # Parameters

    def named_parameters(self) -> dict[str, np.ndarray]:
        named = {}
        for index, dense in enumerate(self.dense_layers):
            named[f"dense{index}.weight"] = dense.weight
            named[f"dense{index}.bias"] = dense.bias
            if index < len(self.bn_layers):
                named[f"bn{index}.gamma"] = self.bn_layers[index].gamma
                named[f"bn{index}.beta"] = self.bn_layers[index].beta
        return named

    def named_gradients(self) -> dict[str, np.ndarray]:
        named = {}
        for index, dense in enumerate(self.dense_layers):
            named[f"dense{index}.weight"] = dense.grad_weight
            named[f"dense{index}.bias"] = dense.grad_bias
            if index < len(self.bn_layers):
                named[f"bn{index}.gamma"] = self.bn_layers[index].grad_gamma
                named[f"bn{index}.beta"] = self.bn_layers[index].grad_beta
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        named = {}
        for index, bn in enumerate(self.bn_layers):
            named[f"bn{index}.running_mean"] = bn.running_mean
            named[f"bn{index}.running_var"] = bn.running_var
        return named

    @property
    def layout(self):
        return make_layout(self.named_parameters())

    def get_params(self) -> ParamVector:
        return ParamVector.from_named(self.named_parameters(), dtype=self.dtype)

    def gradients(self) -> ParamVector:
        return ParamVector.from_named(self.named_gradients(), dtype=self.dtype)

    def set_params(self, params: ParamVector) -> None:
        if params.layout != self.layout:
            raise LayoutMismatchError("The parameter vector does not match this model's layout")
        self._assign(params.to_named())

    def get_buffers(self) -> ParamVector:
        return ParamVector.from_named(self.named_buffers(), dtype=self.dtype)

    def set_buffers(self, buffers: ParamVector) -> None:
        if buffers.layout != make_layout(self.named_buffers()):
            raise LayoutMismatchError("The buffer vector does not match this model's layout")
        named = buffers.to_named()
        if any(np.any(array < 0) for name, array in named.items() if name.endswith("running_var")):
            raise ValueError("Running variances cannot be negative")
        self._assign(named)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: array.copy() for name, array in self.named_parameters().items()}
        state.update({name: array.copy() for name, array in self.named_buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = {**self.named_parameters(), **self.named_buffers()}
        if set(state) != set(expected):
            raise LayoutMismatchError(f"State names differ from the model's: {sorted(set(state) ^ set(expected))}")
        for name, array in state.items():
            if np.shape(array) != expected[name].shape:
                raise ShapeMismatchError(f"{name} has shape {np.shape(array)}, expected {expected[name].shape}")
        self._assign(state)

    def _assign(self, named: dict[str, np.ndarray]) -> None:
        for name, array in named.items():
            prefix, attribute = name.split(".")
            index = int(prefix.removeprefix("dense").removeprefix("bn"))
            layer = self.dense_layers[index] if prefix.startswith("dense") else self.bn_layers[index]
            setattr(layer, attribute, np.array(array, dtype=self.dtype).reshape(getattr(layer, attribute).shape))

    # The batch norm scale vector W^gamma

    @property
    def gamma_size(self) -> int:
        return sum(bn.gamma.size for bn in self.bn_layers)

    def get_bn_gamma(self) -> np.ndarray:
        if not self.bn_layers:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([bn.gamma for bn in self.bn_layers]).copy()

    def set_bn_gamma(self, w_gamma: np.ndarray) -> None:
        w_gamma = np.asarray(w_gamma)
        if w_gamma.shape != (self.gamma_size,):
            raise ShapeMismatchError(f"W^gamma must have {self.gamma_size} entries, got shape {w_gamma.shape}")

        offset = 0
        for bn in self.bn_layers:
            bn.gamma = w_gamma[offset: offset + bn.gamma.size].astype(self.dtype)
            offset += bn.gamma.size

    # Bookkeeping

    def architecture(self) -> dict:
        return {
            "kind": "bn_mlp",
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "classes": self.classes,
            "momentum": self.momentum,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_state_dict(cls, architecture: dict, state: dict[str, np.ndarray]) -> "BnMlpModel":
        model = cls(
            input_dim=int(architecture["input_dim"]),
            hidden_widths=[int(width) for width in architecture["hidden_widths"]],
            classes=int(architecture["classes"]),
            momentum=float(architecture["momentum"]),
            epsilon=float(architecture["epsilon"])
        )
        model.load_state_dict(state)
        return model.eval()

    def copy(self) -> "BnMlpModel":
        duplicate = copy.deepcopy(self)
        for layer in duplicate.dense_layers:
            layer._inputs = None
        for layer in duplicate.bn_layers:
            layer._cache = None
        return duplicate


def _raise_if_not_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"Non-finite values appeared in the {what}")


def _check_labels(labels: np.ndarray, rows: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (rows,):
        raise ShapeMismatchError(f"Expected {rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise LabelRangeError(f"Labels must lie in [0, {classes})")
    return labels.astype(np.int64)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy and its gradient with respect to the logits.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = logits.shape[0]

    loss = float(-log_probs[np.arange(rows), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(rows), labels] -= 1
    return loss, (grad / rows).astype(logits.dtype)


def forward(model: BnMlpModel, batch: np.ndarray) -> np.ndarray:
    """
    Compute logits. In train mode, unfrozen batch norm layers normalise with the batch
    statistics and move their running statistics; otherwise running statistics are used.

    Raises:
        ShapeMismatchError: if the batch has the wrong number of columns.
        BatchSizeError: for a single-sample batch in train mode.
    """
    batch = model.check_batch(batch, training=model.mode == "train")
    logits = model.forward(batch)
    _raise_if_not_finite(logits, what="logits")
    return logits


def backward(model: BnMlpModel, batch: np.ndarray, labels: np.ndarray) -> tuple[float, ParamVector]:
    """
    Run a forward pass and back-propagate the mean softmax cross-entropy.

    Returns:
        tuple[float, ParamVector]: the loss, and the gradients laid out like model.get_params()
    """
    labels = _check_labels(labels, rows=np.shape(batch)[0], classes=model.classes)
    logits = forward(model, batch)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    model.backward_from_logits(grad_logits)

    grads = model.gradients()
    if not grads.is_finite():
        raise NonFiniteError("Non-finite gradients")
    return loss, grads


def sgd_step(model: BnMlpModel, grads: ParamVector, lr: float) -> BnMlpModel:
    """params <- params - lr * grads"""
    if lr < 0:
        raise ValueError("The learning rate cannot be negative")

    params = model.get_params()
    params.check_compatible(grads)
    updated = params.values - np.asarray(lr, dtype=params.dtype) * grads.values.astype(params.dtype)

    _raise_if_not_finite(updated, what="parameters after the SGD step")
    model.set_params(ParamVector(values=updated, layout=params.layout))
    return model


def evaluate_loss(model: BnMlpModel, features: np.ndarray, labels: np.ndarray) -> float:
    labels = _check_labels(labels, rows=np.shape(features)[0], classes=model.classes)
    loss, _ = softmax_cross_entropy(model.predict(features), labels)
    return loss


def predict_labels(model: BnMlpModel, features: np.ndarray) -> np.ndarray:
    return model.predict(features).argmax(axis=1)


def accuracy(model: BnMlpModel, features: np.ndarray, labels: np.ndarray) -> float:
    """Eval-mode classification accuracy"""
    if len(labels) == 0:
        return 0.0
    return float(accuracy_score(y_true=labels, y_pred=predict_labels(model, features)))

"""
Per-client fingerprints hidden in the batch norm scales.

Every client i gets a code F_i in {-1, +1}^N and a secret Gaussian key A_i of shape (M, N),
where M is the size of W^gamma (all BN scales of the model, concatenated). A model carries
client i's fingerprint when the key response B = A_i^T W^gamma has the sign pattern F_i with
a margin of at least delta on every bit.

The fingerprint similarity score (FSS) measures this, normalised so that 1.0 means every
bit meets its margin:

    FSS = sum_j min(delta, b_j * f_j) / (N * delta)

A leaked model is traced back to the client whose record gives it the highest FSS.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from src.setup.config import FingerprintConfig, GaConfig
from src.setup.exceptions import RecordsError, ShapeMismatchError
from src.protection.genetic import GeneticCodeSearch
from src.training_pipeline.checkpoints import load_tensors, save_tensors
from src.training_pipeline.models import BnMlpModel


@dataclass
class FingerprintRecord:
    client_id: int
    code: np.ndarray
    key: np.ndarray
    delta: float

    def __post_init__(self):
        self.code = np.asarray(self.code, dtype=np.int8)
        self.key = np.asarray(self.key, dtype=np.float32)

        if self.code.ndim != 1 or not np.all(np.abs(self.code) == 1):
            raise ValueError("A fingerprint code must be a vector of -1 and +1 entries")
        if self.key.ndim != 2 or self.key.shape[1] != self.code.size:
            raise ShapeMismatchError(f"The key must have shape (M, {self.code.size}), got {self.key.shape}")
        if self.delta <= 0:
            raise ValueError("The margin must be positive")

    @property
    def bits(self) -> int:
        return self.code.size

    @property
    def gamma_size(self) -> int:
        return self.key.shape[0]


@dataclass
class FingerprintContext:
    records: list[FingerprintRecord]
    cfg: FingerprintConfig


@dataclass
class HammingTrace:
    client_id: int
    distance: int
    ambiguous: bool
    candidates: list[int]


def _as_gamma(model_or_gamma: BnMlpModel | np.ndarray) -> np.ndarray:
    if isinstance(model_or_gamma, BnMlpModel):
        return model_or_gamma.get_bn_gamma()
    return np.asarray(model_or_gamma)


def hamming(code_a: np.ndarray, code_b: np.ndarray) -> int:
    code_a, code_b = np.asarray(code_a), np.asarray(code_b)
    if code_a.shape != code_b.shape:
        raise ShapeMismatchError(f"Cannot compare codes of shapes {code_a.shape} and {code_b.shape}")
    return int(np.count_nonzero(code_a != code_b))


def generate_codes(clients: int, bits: int, ga: GaConfig) -> list[np.ndarray]:
    """K codes whose smallest pairwise Hamming distance the genetic search has maximised"""
    result = GeneticCodeSearch(clients=clients, bits=bits, ga=ga).run()
    return [code.copy() for code in result.codes]


def gen(
    clients: int,
    bits: int,
    gamma_size: int,
    seed: int | np.random.SeedSequence,
    ga: GaConfig | None = None,
    margin: float = 0.1
) -> list[FingerprintRecord]:
    """
    Create every client's fingerprint record: standard normal keys of shape (M, N) and codes
    from the genetic search.

    Args:
        clients (int): K
        bits (int): N
        gamma_size (int): M, the length of the model's W^gamma
        seed (int | np.random.SeedSequence): seeds the key draws
        ga (GaConfig | None, optional): settings of the code search
        margin (float, optional): delta

    Returns:
        list[FingerprintRecord]: one record per client, in client order
    """
    ga = ga or GaConfig()
    if clients * bits <= gamma_size:
        logger.warning(
            f"K*N = {clients * bits} does not exceed M = {gamma_size}; a single W^gamma could satisfy several fingerprints"
        )

    rng = np.random.default_rng(seed)
    keys = [rng.standard_normal((gamma_size, bits)).astype(np.float32) for _ in range(clients)]

    if clients >= 2:
        codes = generate_codes(clients, bits, ga=ga)
    else:
        codes = [rng.choice(np.array([-1, 1], dtype=np.int8), size=bits)]

    return [
        FingerprintRecord(client_id=client_id, code=codes[client_id], key=keys[client_id], delta=margin)
        for client_id in range(clients)
    ]


def response(key: np.ndarray, w_gamma: np.ndarray) -> np.ndarray:
    """B = A^T W^gamma, accumulated in float64"""
    key, w_gamma = np.asarray(key), np.asarray(w_gamma)
    if w_gamma.ndim != 1 or key.ndim != 2 or key.shape[0] != w_gamma.size:
        raise ShapeMismatchError(f"A key of shape {key.shape} cannot be applied to W^gamma of shape {w_gamma.shape}")
    return key.T.astype(np.float64) @ w_gamma.astype(np.float64)


def _signed_responses(key: np.ndarray, code: np.ndarray, w_gamma: np.ndarray) -> np.ndarray:
    code = np.asarray(code)
    if code.ndim != 1 or code.size != np.shape(key)[1]:
        raise ShapeMismatchError("The code length must match the number of key columns")
    return response(key, w_gamma) * code


def hinge_loss(key: np.ndarray, code: np.ndarray, w_gamma: np.ndarray, delta: float) -> float:
    """sum_j max(delta - b_j * f_j, 0)"""
    return float(np.maximum(delta - _signed_responses(key, code, w_gamma), 0).sum())


def hinge_gradient(key: np.ndarray, code: np.ndarray, w_gamma: np.ndarray, delta: float) -> np.ndarray:
    """The gradient of the hinge loss with respect to W^gamma: -sum over violated bits of f_j * A[:, j]"""
    violated = delta - _signed_responses(key, code, w_gamma) > 0
    signed_code = np.asarray(code, dtype=np.float64) * violated
    return -(np.asarray(key, dtype=np.float64) @ signed_code)


def fss(key: np.ndarray, code: np.ndarray, w_gamma: np.ndarray, delta: float) -> float:
    signed = _signed_responses(key, code, w_gamma)
    return float(np.minimum(delta, signed).sum() / (signed.size * delta))


def record_fss(record: FingerprintRecord, model_or_gamma: BnMlpModel | np.ndarray) -> float:
    return fss(record.key, record.code, _as_gamma(model_or_gamma), record.delta)


def fss_vector(model_or_gamma: BnMlpModel | np.ndarray, records: list[FingerprintRecord]) -> np.ndarray:
    w_gamma = _as_gamma(model_or_gamma)
    return np.array([record_fss(record, w_gamma) for record in records])


def linsert(
    model: BnMlpModel,
    record: FingerprintRecord,
    cfg: FingerprintConfig,
    loss_history: list[float] | None = None
) -> BnMlpModel:
    """
    Insert a fingerprint into the batch norm scales of a model (in place), by gradient
    descent on the hinge loss with respect to W^gamma alone.

    A step of size lr is taken only if it strictly lowers the loss; otherwise it is halved,
    up to max_backtracks times, after which insertion stops. The loop also ends once the FSS
    reaches fss_threshold or after max_iter steps.

    Args:
        model (BnMlpModel): the model to fingerprint
        record (FingerprintRecord): the client's record (its key must have one row per BN scale)
        cfg (FingerprintConfig): learning rate, threshold, iteration cap and backtracking budget
        loss_history (list[float] | None, optional): if given, receives the loss before the first step and after every step

    Returns:
        BnMlpModel: the same model, with only its BN gammas changed
    """
    if record.gamma_size != model.gamma_size:
        raise ShapeMismatchError(f"The key expects {record.gamma_size} BN scales but the model has {model.gamma_size}")

    w_gamma = model.get_bn_gamma().astype(np.float64)
    loss = hinge_loss(record.key, record.code, w_gamma, record.delta)
    score = fss(record.key, record.code, w_gamma, record.delta)
    if loss_history is not None:
        loss_history.append(loss)

    iterations = 0
    while iterations < cfg.max_iter and score < cfg.fss_threshold:
        gradient = hinge_gradient(record.key, record.code, w_gamma, record.delta)

        step = cfg.lr
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            # Candidates are rounded to the model's precision so the loss is that of the stored gammas
            candidate = (w_gamma - step * gradient).astype(model.dtype).astype(np.float64)
            candidate_loss = hinge_loss(record.key, record.code, candidate, record.delta)
            if candidate_loss < loss:
                accepted = True
                break
            step /= 2

        if not accepted:
            logger.debug(f"Fingerprint insertion for client {record.client_id} stalled at a loss of {loss:.6f}")
            break

        w_gamma, loss = candidate, candidate_loss
        score = fss(record.key, record.code, w_gamma, record.delta)
        iterations += 1
        if loss_history is not None:
            loss_history.append(loss)

    if score < cfg.fss_threshold:
        logger.warning(
            f"Fingerprint insertion for client {record.client_id} ended after {iterations} steps at an FSS of {score:.4f}"
        )

    model.set_bn_gamma(w_gamma)
    return model


def trace(model_or_gamma: BnMlpModel | np.ndarray, records: list[FingerprintRecord]) -> int:
    """
    The client whose record scores the model highest. Ties go to the lowest client id, with
    a warning.
    """
    if not records:
        raise ValueError("Tracing needs at least one fingerprint record")

    scores = fss_vector(model_or_gamma, records)
    best = scores.max()
    tied = [record.client_id for record, score in zip(records, scores) if score == best]
    if len(tied) > 1:
        logger.warning(f"Clients {tied} are tied for the highest FSS ({best:.4f}); reporting the lowest id")

    return min(tied)


def extract_code(model_or_gamma: BnMlpModel | np.ndarray, record: FingerprintRecord) -> np.ndarray:
    """sgn(A^T W^gamma), where a zero response counts as +1"""
    return np.where(response(record.key, _as_gamma(model_or_gamma)) >= 0, 1, -1).astype(np.int8)


def hd_trace(model_or_gamma: BnMlpModel | np.ndarray, records: list[FingerprintRecord]) -> HammingTrace:
    """
    The baseline tracer: extract a code with each record's key and pick the record whose code
    is nearest in Hamming distance. Several records at the same distance make the answer
    ambiguous, which is reported rather than hidden.
    """
    if not records:
        raise ValueError("Tracing needs at least one fingerprint record")

    w_gamma = _as_gamma(model_or_gamma)
    distances = [hamming(extract_code(w_gamma, record), record.code) for record in records]
    nearest = min(distances)
    candidates = sorted(record.client_id for record, distance in zip(records, distances) if distance == nearest)
    return HammingTrace(client_id=candidates[0], distance=nearest, ambiguous=len(candidates) > 1, candidates=candidates)


def traceability_rate(models: list[BnMlpModel | np.ndarray], records: list[FingerprintRecord]) -> float:
    """The share of client models (listed in record order) that trace back to their own client"""
    if len(models) != len(records):
        raise ValueError(f"Got {len(models)} models for {len(records)} records")
    if not records:
        return 0.0

    hits = sum(trace(model, records) == record.client_id for model, record in zip(models, records))
    return hits / len(records)


def code_to_string(code: np.ndarray) -> str:
    return " ".join("+1" if bit > 0 else "-1" for bit in np.asarray(code))


def keys_path_for(records_path: Path) -> Path:
    records_path = Path(records_path)
    return records_path.with_name(f"{records_path.stem}.keys.ftck")


def save_records(records_path: Path, records: list[FingerprintRecord]) -> None:
    """Codes, margins and ids go to JSON; the keys go to a .ftck file next to it"""
    records_path = Path(records_path)
    records_path.parent.mkdir(parents=True, exist_ok=True)

    payload = [
        {"client_id": record.client_id, "code": record.code.astype(int).tolist(), "delta": record.delta}
        for record in records
    ]
    records_path.write_text(json.dumps(payload), encoding="utf-8")
    save_tensors(keys_path_for(records_path), tensors={f"key_{record.client_id}": record.key for record in records})


def load_records(records_path: Path) -> list[FingerprintRecord]:
    """
    Raises:
        RecordsError: if the records are empty, malformed, or have no matching key.
    """
    records_path = Path(records_path)
    try:
        payload = json.loads(records_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as error:
        raise RecordsError(f"{records_path} is not valid JSON: {error}") from error

    if not isinstance(payload, list) or not payload:
        raise RecordsError(f"{records_path} does not contain any fingerprint records")

    keys, _ = load_tensors(keys_path_for(records_path))
    records = []
    for entry in payload:
        try:
            key = keys[f"key_{int(entry['client_id'])}"]
            records.append(
                FingerprintRecord(client_id=int(entry["client_id"]), code=entry["code"], key=key, delta=float(entry["delta"]))
            )
        except (KeyError, TypeError, ValueError) as error:
            raise RecordsError(f"{records_path} holds an unusable record: {error}") from error

    return records

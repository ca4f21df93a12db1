import numpy as np
import pytest

from src.setup.config import FingerprintConfig, GaConfig
from src.setup.exceptions import RecordsError, ShapeMismatchError
from src.protection.fingerprint import (
    FingerprintRecord, code_to_string, extract_code, fss, fss_vector, gen, hamming, hd_trace, hinge_loss, linsert,
    load_records, record_fss, response, save_records, trace, traceability_rate
)
from src.training_pipeline.models import BnMlpModel


QUICK_GA = GaConfig(population=16, generations=10)


def _records(clients: int, bits: int, gamma_size: int, seed: int = 0, delta: float = 0.1) -> list[FingerprintRecord]:
    return gen(clients=clients, bits=bits, gamma_size=gamma_size, seed=seed, ga=QUICK_GA, margin=delta)


def _satisfying_gamma(record: FingerprintRecord, scale: float = 2.0) -> np.ndarray:
    """The least-norm W^gamma whose key response is exactly scale * delta * code"""
    target = scale * record.delta * record.code.astype(np.float64)
    w_gamma, *_ = np.linalg.lstsq(record.key.T.astype(np.float64), target, rcond=None)
    return w_gamma


@pytest.fixture
def default_model() -> BnMlpModel:
    return BnMlpModel(input_dim=64, hidden_widths=[128, 128], classes=10, seed=0)


def test_hamming():
    assert hamming(np.array([1, -1, 1]), np.array([1, -1, 1])) == 0
    assert hamming(np.array([1, -1, 1]), np.array([-1, 1, -1])) == 3
    with pytest.raises(ShapeMismatchError):
        hamming(np.array([1, 1]), np.array([1, 1, 1]))


def test_keys_are_standard_normal():
    records = _records(clients=2, bits=128, gamma_size=512, seed=3)
    entries = np.concatenate([record.key.ravel() for record in records]).astype(np.float64)

    assert entries.size >= 100_000
    assert abs(entries.mean()) <= 0.02
    assert 0.95 <= entries.var() <= 1.05


def test_generated_codes_are_distinct_and_reproducible():
    first = _records(clients=5, bits=16, gamma_size=64, seed=1)
    second = _records(clients=5, bits=16, gamma_size=64, seed=1)

    codes = {tuple(record.code.tolist()) for record in first}
    assert len(codes) == 5
    for left, right in zip(first, second):
        np.testing.assert_array_equal(left.code, right.code)
        np.testing.assert_array_equal(left.key, right.key)
    assert [record.client_id for record in first] == [0, 1, 2, 3, 4]


def test_short_fingerprints_are_flagged(loguru_messages):
    _records(clients=2, bits=8, gamma_size=64)
    assert any(level == "WARNING" and "does not exceed" in message for level, message in loguru_messages)


def test_response_is_the_key_transpose_times_gamma():
    rng = np.random.default_rng(0)
    key, w_gamma = rng.standard_normal((6, 3)), rng.standard_normal(6)

    np.testing.assert_array_equal(response(key, np.zeros(6)), np.zeros(3))
    expected = [sum(key[i, j] * w_gamma[i] for i in range(6)) for j in range(3)]
    np.testing.assert_allclose(response(key, w_gamma), expected, rtol=1e-12)

    with pytest.raises(ShapeMismatchError):
        response(key, np.zeros(5))


def test_hinge_loss_by_hand():
    identity = np.eye(2)
    ones = np.array([1, 1])

    assert hinge_loss(identity, ones, np.array([0.5, 0.5]), delta=0.5) == 0.0
    assert hinge_loss(identity, ones, np.zeros(2), delta=0.5) == pytest.approx(1.0)
    assert hinge_loss(identity, ones, np.array([0.7, -0.1]), delta=0.5) == pytest.approx(0.6)


def test_fss_by_hand():
    identity = np.eye(4)
    ones = np.ones(4)

    assert fss(identity, ones, np.array([2.0, 1.0, -1.0, 0.5]), delta=1.0) == pytest.approx(0.375)
    assert fss(identity, ones, np.zeros(4), delta=1.0) == 0.0
    assert fss(identity, ones, np.full(4, 3.0), delta=1.0) == pytest.approx(1.0)


def test_fss_never_exceeds_one_and_is_scale_covariant():
    rng = np.random.default_rng(2)
    for _ in range(50):
        key = rng.standard_normal((20, 8))
        code = rng.choice([-1, 1], size=8)
        w_gamma = rng.standard_normal(20)
        delta = float(rng.uniform(0.05, 1.0))
        scale = float(rng.uniform(0.1, 10.0))

        score = fss(key, code, w_gamma, delta)
        assert score <= 1.0 + 1e-12
        assert fss(key, code, scale * w_gamma, scale * delta) == pytest.approx(score, rel=1e-9, abs=1e-12)


def test_linsert_reaches_the_threshold_changing_only_gammas(default_model):
    record = _records(clients=10, bits=128, gamma_size=default_model.gamma_size)[4]
    before = default_model.copy()
    history = []

    linsert(default_model, record, FingerprintConfig(), loss_history=history)

    assert record_fss(record, default_model) >= 0.95
    assert np.all(np.diff(history) < 0)
    for name, array in before.named_parameters().items():
        if not name.endswith("gamma"):
            np.testing.assert_array_equal(default_model.named_parameters()[name], array)
    np.testing.assert_array_equal(default_model.get_buffers().values, before.get_buffers().values)


def test_full_insertion_reproduces_the_code(default_model):
    record = _records(clients=10, bits=128, gamma_size=default_model.gamma_size)[1]
    linsert(default_model, record, FingerprintConfig(fss_threshold=1.0, max_iter=2000))

    assert record_fss(record, default_model) == pytest.approx(1.0)
    np.testing.assert_array_equal(extract_code(default_model, record), record.code)


def test_linsert_leaves_satisfied_models_alone(small_model):
    record = _records(clients=3, bits=8, gamma_size=small_model.gamma_size)[0]
    small_model.set_bn_gamma(_satisfying_gamma(record))
    before = small_model.get_bn_gamma()

    assert record_fss(record, small_model) == pytest.approx(1.0)
    linsert(small_model, record, FingerprintConfig(bits=8))
    np.testing.assert_array_equal(small_model.get_bn_gamma(), before)


def test_linsert_rejects_keys_of_the_wrong_size(small_model):
    record = _records(clients=2, bits=8, gamma_size=small_model.gamma_size + 1)[0]
    with pytest.raises(ShapeMismatchError):
        linsert(small_model, record, FingerprintConfig(bits=8))


def test_every_fingerprinted_copy_traces_to_its_client(default_model):
    records = _records(clients=10, bits=128, gamma_size=default_model.gamma_size)
    cfg = FingerprintConfig()
    copies = [linsert(default_model.copy(), record, cfg) for record in records]

    for record, copy in zip(records, copies):
        assert trace(copy, records) == record.client_id
        assert hd_trace(copy, records).client_id == record.client_id

    assert traceability_rate(copies, records) == 1.0
    assert traceability_rate(copies[1:] + copies[:1], records) == 0.0


def test_trace_of_a_least_squares_fingerprint():
    records = _records(clients=5, bits=16, gamma_size=64, seed=6)
    w_gamma = _satisfying_gamma(records[3])

    scores = fss_vector(w_gamma, records)
    assert scores[3] == pytest.approx(1.0)
    assert trace(w_gamma, records) == 3
    assert hd_trace(w_gamma, records).client_id == 3


def test_a_single_record_always_wins():
    record = _records(clients=2, bits=8, gamma_size=32)[1]
    assert trace(np.zeros(32), [record]) == 1


def test_tracing_needs_records():
    with pytest.raises(ValueError):
        trace(np.zeros(4), [])
    with pytest.raises(ValueError):
        hd_trace(np.zeros(4), [])


def test_ties_go_to_the_lowest_client_id(loguru_messages):
    rng = np.random.default_rng(1)
    key, code = rng.standard_normal((16, 4)), rng.choice([-1, 1], size=4)
    twins = [FingerprintRecord(client_id=client_id, code=code, key=key, delta=0.1) for client_id in (2, 5)]

    assert trace(rng.standard_normal(16), twins) == 2
    assert any(level == "WARNING" for level, _ in loguru_messages)


def test_score_separates_clients_that_hamming_distance_cannot():
    rng = np.random.default_rng(8)
    delta, bits, wrong = 0.1, 16, 3
    records = [
        FingerprintRecord(client_id=client_id, code=rng.choice([-1, 1], size=bits), key=rng.standard_normal((64, bits)), delta=delta)
        for client_id in range(2)
    ]

    # Client 0 misses three bits by a hair, client 1 misses three bits by a mile
    targets = []
    for record, miss in zip(records, (0.01, 5.0)):
        target = 2 * delta * record.code.astype(np.float64)
        target[:wrong] = -miss * record.code[:wrong]
        targets.append(target)

    system = np.vstack([record.key.T.astype(np.float64) for record in records])
    w_gamma, *_ = np.linalg.lstsq(system, np.concatenate(targets), rcond=None)

    by_hamming = hd_trace(w_gamma, records)
    assert by_hamming.ambiguous
    assert by_hamming.distance == wrong
    assert by_hamming.candidates == [0, 1]
    assert trace(w_gamma, records) == 0


def test_zero_responses_count_as_plus_one():
    record = FingerprintRecord(client_id=0, code=np.array([1, -1]), key=np.eye(2), delta=0.1)
    assert extract_code(np.zeros(2), record).tolist() == [1, 1]
    assert code_to_string(np.array([1, -1, 1])) == "+1 -1 +1"


def test_records_round_trip(tmp_path):
    records = _records(clients=3, bits=8, gamma_size=32)
    path = tmp_path / "records.json"
    save_records(path, records)

    restored = load_records(path)
    assert [record.client_id for record in restored] == [0, 1, 2]
    for original, copy in zip(records, restored):
        np.testing.assert_array_equal(copy.code, original.code)
        np.testing.assert_array_equal(copy.key, original.key)
        assert copy.delta == original.delta


@pytest.mark.parametrize("content", ["", "[]", "{\"client_id\": 0}"])
def test_unusable_records_files_are_rejected(tmp_path, content):
    path = tmp_path / "records.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(RecordsError):
        load_records(path)


def test_records_validate_their_shapes():
    with pytest.raises(ShapeMismatchError):
        FingerprintRecord(client_id=0, code=np.array([1, -1, 1]), key=np.zeros((4, 2)), delta=0.1)
    with pytest.raises(ValueError):
        FingerprintRecord(client_id=0, code=np.array([1, 0]), key=np.zeros((4, 2)), delta=0.1)

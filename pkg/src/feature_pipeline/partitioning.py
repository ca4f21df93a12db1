"""
Splitting the training pool between clients, either uniformly (i.i.d.) or with per-class
Dirichlet proportions to simulate non-i.i.d. federations.
"""
from dataclasses import dataclass

import numpy as np
from loguru import logger

from src.feature_pipeline.data_sourcing import Dataset


@dataclass
class Partition:
    client_indices: list[np.ndarray]

    def __post_init__(self):
        self.client_indices = [np.asarray(indices, dtype=np.int64) for indices in self.client_indices]

    @property
    def clients(self) -> int:
        return len(self.client_indices)

    @property
    def sizes(self) -> list[int]:
        return [indices.size for indices in self.client_indices]

    def client_data(self, dataset: Dataset, client_id: int) -> Dataset:
        return dataset.subset(self.client_indices[client_id])

    def is_valid(self) -> bool:
        """Disjoint, non-empty lists"""
        merged = np.concatenate(self.client_indices) if self.client_indices else np.zeros(0, dtype=np.int64)
        return all(size > 0 for size in self.sizes) and np.unique(merged).size == merged.size


def partition_iid(dataset: Dataset, clients: int, seed: int) -> Partition:
    """Shuffle the indices and deal them out in shards whose sizes differ by at most one"""
    if clients < 1:
        raise ValueError("There must be at least one client")
    if len(dataset) < clients:
        raise ValueError(f"Cannot give {clients} clients a sample each from {len(dataset)} samples")

    rng = np.random.default_rng(seed)
    shards = np.array_split(rng.permutation(len(dataset)), clients)
    return Partition(client_indices=[np.sort(shard) for shard in shards])


def _dirichlet_proportions(rng: np.random.Generator, xi: float, clients: int) -> np.ndarray:
    proportions = rng.dirichlet(np.full(clients, xi))
    if not np.all(np.isfinite(proportions)) or proportions.sum() <= 0:
        # Very small concentrations can underflow every component; hand the class to one client
        proportions = np.zeros(clients)
        proportions[rng.integers(clients)] = 1.0
    return proportions


def partition_dirichlet(dataset: Dataset, clients: int, xi: float, seed: int) -> Partition:
    """
    For every class, draw client proportions from Dirichlet(xi * 1) and cut the (shuffled)
    class indices accordingly. Smaller xi gives more skewed clients.

    Clients that end up empty each take one sample from the client that currently holds
    the most.

    Args:
        dataset (Dataset): the pool to partition
        clients (int): the number of clients
        xi (float): the concentration parameter (any positive value)
        seed (int): makes the partition reproducible

    Returns:
        Partition: one sorted index array per client
    """
    if clients < 1:
        raise ValueError("There must be at least one client")
    if xi <= 0:
        raise ValueError("The concentration parameter must be positive")
    if len(dataset) < clients:
        raise ValueError(f"Cannot give {clients} clients a sample each from {len(dataset)} samples")

    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(clients)]

    for label in range(dataset.class_count):
        class_indices = np.flatnonzero(dataset.labels == label)
        if class_indices.size == 0:
            continue

        rng.shuffle(class_indices)
        proportions = _dirichlet_proportions(rng, xi=xi, clients=clients)
        cuts = (np.cumsum(proportions) * class_indices.size).astype(np.int64)[:-1]
        for client_id, piece in enumerate(np.split(class_indices, cuts)):
            buckets[client_id].extend(piece.tolist())

    repairs = 0
    for client_id in range(clients):
        if not buckets[client_id]:
            largest = max(range(clients), key=lambda other: len(buckets[other]))
            buckets[client_id].append(buckets[largest].pop())
            repairs += 1

    if repairs:
        logger.debug(f"Gave {repairs} empty clients one sample each")

    return Partition(client_indices=[np.sort(np.asarray(bucket, dtype=np.int64)) for bucket in buckets])

"""
A genetic algorithm that looks for K binary codes of N bits (stored as -1/+1) whose
smallest pairwise Hamming distance is as large as possible.

Each individual is a whole code set, so a population is an array of shape (P, K, N).
"""
from dataclasses import dataclass, field
from typing import final

import numpy as np
from loguru import logger

from src.setup.config import GaConfig


def pairwise_hamming(code_sets: np.ndarray) -> np.ndarray:
    """
    Hamming distances between every pair of codes, for one code set (K, N) or a batch
    of them (P, K, N). For -1/+1 codes, HD(a, b) = (N - <a, b>) / 2.
    """
    codes = np.asarray(code_sets, dtype=np.float32)
    bits = codes.shape[-1]
    inner = codes @ np.swapaxes(codes, -1, -2)
    return np.rint((bits - inner) / 2).astype(np.int64)


def min_distance(codes: np.ndarray) -> int:
    distances = pairwise_hamming(codes)
    upper = np.triu_indices(distances.shape[-1], k=1)
    return int(distances[upper].min())


def fitness(population: np.ndarray) -> np.ndarray:
    """
    The smallest pairwise distance of every individual, minus a tie-breaking fraction that
    grows with the number of pairs sitting at that smallest distance. The fraction stays
    below one, so the minimum distance always dominates.
    """
    clients = population.shape[1]
    distances = pairwise_hamming(population)
    upper = np.triu_indices(clients, k=1)
    pair_distances = distances[:, upper[0], upper[1]]

    smallest = pair_distances.min(axis=1)
    at_smallest = (pair_distances == smallest[:, None]).sum(axis=1)
    return smallest - at_smallest / clients**2


@dataclass
class SearchResult:
    codes: np.ndarray
    min_distance: int
    history: list[int] = field(default_factory=list)


@final
class GeneticCodeSearch:

    def __init__(self, clients: int, bits: int, ga: GaConfig):
        """
        Args:
            clients (int): the number of codes K (at least 2)
            bits (int): the code length N
            ga (GaConfig): population size, generation count, operator rates and the seed
        """
        if clients < 2:
            raise ValueError("Code design needs at least two clients")
        if bits < 1:
            raise ValueError("Codes need at least one bit")

        self.clients = clients
        self.bits = bits
        self.ga = ga
        self.mutation_rate = ga.mutation_rate if ga.mutation_rate is not None else 1 / (clients * bits)
        self.rng = np.random.default_rng(ga.seed)

    def initial_population(self) -> np.ndarray:
        return self.rng.choice(np.array([-1, 1], dtype=np.int8), size=(self.ga.population, self.clients, self.bits))

    def select(self, population: np.ndarray, scores: np.ndarray) -> np.ndarray:
        """Tournament selection: each parent is the fittest of tournament_k random picks"""
        size = population.shape[0]
        contenders = self.rng.integers(size, size=(size, self.ga.tournament_k))
        winners = contenders[np.arange(size), scores[contenders].argmax(axis=1)]
        return population[winners]

    def crossover(self, parents: np.ndarray) -> np.ndarray:
        """
        Uniform crossover between consecutive parents: every client's code in the child comes
        from one parent or the other with equal probability.
        """
        size = parents.shape[0]
        partners = parents[np.roll(np.arange(size), -1)]
        crossing = self.rng.random(size) < self.ga.crossover_rate
        take_partner = (self.rng.random((size, self.clients)) < 0.5) & crossing[:, None]
        return np.where(take_partner[:, :, None], partners, parents)

    def mutate(self, children: np.ndarray) -> np.ndarray:
        flips = self.rng.random(children.shape) < self.mutation_rate
        return np.where(flips, -children, children).astype(np.int8)

    @staticmethod
    def survivors(
        population: np.ndarray,
        scores: np.ndarray,
        children: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Parents and children compete for the places in the next generation, and the fittest
        `population` of them (earliest first among equals) survive, sorted best first.
        """
        size = population.shape[0]
        merged = np.concatenate([population, children])
        merged_scores = np.concatenate([scores, fitness(children)])
        order = np.argsort(-merged_scores, kind="stable")[:size]
        return merged[order], merged_scores[order]

    def run(self) -> SearchResult:
        population = self.initial_population()
        scores = fitness(population)

        best_index = int(scores.argmax())
        best_codes, best_score = population[best_index].copy(), float(scores[best_index])
        history = [min_distance(best_codes)]

        for _ in range(self.ga.generations):
            children = self.mutate(self.crossover(self.select(population, scores)))
            population, scores = self.survivors(population, scores, children)

            if scores[0] > best_score:
                best_codes, best_score = population[0].copy(), float(scores[0])
            history.append(min_distance(best_codes))

        result = SearchResult(codes=best_codes, min_distance=min_distance(best_codes), history=history)
        logger.info(
            f"Designed {self.clients} codes of {self.bits} bits with a minimum Hamming distance of {result.min_distance}"
        )
        return result

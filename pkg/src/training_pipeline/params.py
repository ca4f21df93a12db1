"""
Flat and named views of a model's trainable parameters.

A ParamVector is the unit that aggregation, the global memory, the projection step and
SGD all work on. The layout travels with the values so that two vectors taken from
differently shaped models can never be mixed by accident.
"""
from dataclasses import dataclass

import numpy as np

from src.setup.exceptions import LayoutMismatchError, ShapeMismatchError


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def length(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


Layout = tuple[LayoutEntry, ...]


def make_layout(named: dict[str, np.ndarray]) -> Layout:
    entries = []
    offset = 0
    for name, array in named.items():
        entry = LayoutEntry(name=name, offset=offset, shape=tuple(int(size) for size in np.shape(array)))
        entries.append(entry)
        offset += entry.length
    return tuple(entries)


class ParamVector:

    def __init__(self, values: np.ndarray, layout: Layout):
        total = sum(entry.length for entry in layout)
        values = np.asarray(values)
        if values.ndim != 1 or values.size != total:
            raise ShapeMismatchError(f"Expected a flat vector of {total} values, got shape {values.shape}")

        self.values = values
        self.layout = layout

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], dtype: np.dtype | type = np.float32) -> "ParamVector":
        """
        Flatten named tensors into one vector. The order of the dictionary is the order of the
        layout, so callers are responsible for passing tensors in a fixed order.
        """
        layout = make_layout(named)
        if not named:
            return cls(values=np.zeros(0, dtype=dtype), layout=layout)

        values = np.concatenate([np.asarray(array, dtype=dtype).ravel() for array in named.values()])
        return cls(values=values, layout=layout)

    def to_named(self) -> dict[str, np.ndarray]:
        return {
            entry.name: self.values[entry.offset: entry.offset + entry.length].reshape(entry.shape).copy()
            for entry in self.layout
        }

    @property
    def names(self) -> list[str]:
        return [entry.name for entry in self.layout]

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def __len__(self) -> int:
        return self.values.size

    def check_compatible(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise LayoutMismatchError("The two parameter vectors have different layouts")

    def segment(self, name: str) -> np.ndarray:
        """A writable view of the entries that belong to one named tensor"""
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset: entry.offset + entry.length]
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(values=self.values.copy(), layout=self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(values=np.zeros_like(self.values), layout=self.layout)

    def astype(self, dtype: np.dtype | type) -> "ParamVector":
        return ParamVector(values=self.values.astype(dtype), layout=self.layout)

    def dot(self, other: "ParamVector") -> float:
        """Inner product accumulated in float64 whatever the storage precision is"""
        self.check_compatible(other)
        return float(np.dot(self.values.astype(np.float64), other.values.astype(np.float64)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector(values=self.values + other.values, layout=self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self.check_compatible(other)
        return ParamVector(values=self.values - other.values, layout=self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(values=(self.values * scalar).astype(self.values.dtype), layout=self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(values=-self.values, layout=self.layout)

    def __repr__(self) -> str:
        return f"ParamVector(size={len(self)}, tensors={len(self.layout)}, dtype={self.dtype})"

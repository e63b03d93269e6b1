"""Named parameter storage and seeded initialisation."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype


class Params(dict):
    """Ordered ``name -> Tensor`` mapping; insertion order is the canonical order."""

    def scope(self, prefix: str) -> "Params":
        """View of the entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return Params({k[len(p):]: v for k, v in self.items() if k.startswith(p)})

    def add(self, prefix: str, other: "Params") -> None:
        for k, v in other.items():
            self[f"{prefix}.{k}"] = v

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=default_dtype())


def param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(arr, dtype=default_dtype()), requires_grad=True, name=name)


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))

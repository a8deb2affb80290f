"""Seed derivation tree on top of numpy's counter-based Philox generator.

All randomness flows from one root seed: ``RngState(seed).child("flow", "train")``
yields an independent stream whose identity depends only on the path of names.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _name_key(name: str | int) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngState:
    seed: int
    path: tuple[int, ...] = ()

    def child(self, *names: str | int) -> RngState:
        return RngState(self.seed, self.path + tuple(_name_key(n) for n in names))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng: RngState | np.random.Generator | int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    return RngState(int(rng)).generator()

"""Splittable random streams.

Every replica owns one stream per primitive kind (kernel uniforms, kernel
normals, SA noise). A stream is a Philox generator keyed by
``SeedSequence(seed, spawn_key=(stream_id, replica, kind))`` so the draws a
replica sees never depend on which worker ran it or how many steps were
requested per call.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KERNEL_UNIFORM = 0
KERNEL_NORMAL = 1
SA_NOISE = 2
PROBE = 3


def spawn_key(stream_id: int, replica: int, kind: int) -> tuple[int, int, int]:
    return (int(stream_id), int(replica), int(kind))


def make_generator(seed: int, key: tuple[int, ...]) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def generator(seed: int, *key: int) -> np.random.Generator:
    """Free-standing generator for diagnostics (contraction probes, MC mean fields)."""
    return make_generator(seed, (PROBE, *key))


@dataclass
class ReplicaStream:
    """The three primitive draw sources of one replica."""

    seed: int
    stream_id: int
    replica: int

    def __post_init__(self) -> None:
        self._uniform = make_generator(self.seed, spawn_key(self.stream_id, self.replica, KERNEL_UNIFORM))
        self._normal = make_generator(self.seed, spawn_key(self.stream_id, self.replica, KERNEL_NORMAL))
        self._noise = make_generator(self.seed, spawn_key(self.stream_id, self.replica, SA_NOISE))

    def uniforms(self, steps: int, width: int) -> np.ndarray:
        if width == 0:
            return np.empty((steps, 0))
        return self._uniform.random((steps, width))

    def normals(self, steps: int, width: int) -> np.ndarray:
        if width == 0:
            return np.empty((steps, 0))
        return self._normal.standard_normal((steps, width))

    def noise(self, steps: int, width: int) -> np.ndarray:
        return self._noise.standard_normal((steps, width))

    def describe(self) -> dict:
        return {"seed": int(self.seed), "spawn_key": [int(self.stream_id), int(self.replica)]}


def replica_streams(seed: int, stream_id: int, replicas: range | list[int]) -> list[ReplicaStream]:
    return [ReplicaStream(seed, stream_id, r) for r in replicas]


def stacked_draws(streams: list[ReplicaStream], steps: int, n_uniform: int, n_normal: int, noise_dim: int):
    """Draw a chunk for a replica block; arrays are laid out (steps, replicas, width)."""
    u = np.stack([s.uniforms(steps, n_uniform) for s in streams], axis=1)
    z = np.stack([s.normals(steps, n_normal) for s in streams], axis=1)
    xi = np.stack([s.noise(steps, noise_dim) for s in streams], axis=1)
    return u, z, xi

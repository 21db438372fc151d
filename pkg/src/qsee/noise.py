"""Counter-based Brownian increments for truncated cylindrical noise.

Each increment ``dW[m, k]`` of path ``path_index`` is a pure function of
``(master_seed, path_index, m, k)``.  The 64-bit key is scrambled with the
SplitMix64 finalizer and mapped to a Gaussian by the inverse normal CDF, so
any sub-table can be regenerated bit-identically without replaying a stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError

__all__ = ["NoiseSpec", "NoisePath", "standard_normals", "sample_path", "coarsen"]

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _key(value: int, lane: int) -> np.ndarray:
    return np.uint64(value & _MASK) + np.uint64(lane) * _GOLDEN


def standard_normals(seed: int, path_index: int, steps: np.ndarray, modes: np.ndarray) -> np.ndarray:
    """Standard normal table indexed by ``steps x modes`` for one path."""
    steps = np.asarray(steps, dtype=np.uint64)[:, None]
    modes = np.asarray(modes, dtype=np.uint64)[None, :]
    with np.errstate(over="ignore"):
        z = _mix(_key(seed, 1))
        z = _mix(z ^ _key(path_index, 2))
        z = _mix(z ^ (steps + np.uint64(3) * _GOLDEN))
        z = _mix(z ^ (modes + np.uint64(4) * _GOLDEN))
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True)
class NoiseSpec:
    """Seed and shape of the increment table of every path."""

    master_seed: int
    n_modes: int
    n_steps: int
    dt: float

    def __post_init__(self):
        if self.n_modes < 1 or self.n_steps < 1:
            raise ConfigurationError("noise needs at least one mode and one step")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    @property
    def T(self) -> float:
        return self.n_steps * self.dt


@dataclass(frozen=True, eq=False)
class NoisePath:
    """Brownian increments ``dW[m, k] ~ N(0, dt)`` of one path.

    Row ``i`` holds global step ``step_offset + i``.
    """

    increments: np.ndarray
    dt: float
    path_index: int = 0
    master_seed: int = 0
    step_offset: int = 0

    def rows(self, start: int, stop: int) -> np.ndarray:
        """Increments for global steps ``start <= m < stop``."""
        lo, hi = start - self.step_offset, stop - self.step_offset
        if lo < 0 or hi > self.n_steps:
            raise ConfigurationError(f"noise path does not cover steps {start}..{stop}")
        return self.increments[lo:hi]

    @property
    def n_steps(self) -> int:
        return int(self.increments.shape[0])

    @property
    def n_modes(self) -> int:
        return int(self.increments.shape[1])


def sample_path(spec: NoiseSpec, path_index: int, start: int = 0, stop: int | None = None) -> NoisePath:
    """Increments of path ``path_index`` for steps ``start <= m < stop``.

    Rows of a partial table coincide with the matching rows of the full table.
    """
    stop = spec.n_steps if stop is None else stop
    if not 0 <= start < stop <= spec.n_steps:
        raise ConfigurationError("invalid step range")
    z = standard_normals(spec.master_seed, path_index, np.arange(start, stop), np.arange(spec.n_modes))
    return NoisePath(np.sqrt(spec.dt) * z, spec.dt, path_index, spec.master_seed, start)


def coarsen(path: NoisePath, factor: int) -> NoisePath:
    """Sum blocks of ``factor`` consecutive increments."""
    M = path.n_steps
    if factor < 1 or M % factor or path.step_offset % factor:
        raise ConfigurationError(f"factor {factor} does not divide {M} steps")
    inc = path.increments.reshape(M // factor, factor, -1).sum(axis=1)
    return NoisePath(inc, path.dt * factor, path.path_index, path.master_seed, path.step_offset // factor)

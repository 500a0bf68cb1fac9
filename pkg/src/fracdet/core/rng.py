"""Seeded randomness and weight initialisation.

Every random draw in the package goes through a ``numpy.random.Generator``
backed by PCG64. Its output stream for a given seed is fixed across platforms
and numpy versions, which is what the bit-reproducibility guarantees rely on.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def uniform_init(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0, dtype=DEFAULT_DTYPE
) -> Tensor:
    """Fan-in scaled uniform weights with variance gain**2 / fan_in.

    Use ``gain = sqrt(2)`` in front of a ReLU to keep activation scale.
    """
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape: tuple[int, ...], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

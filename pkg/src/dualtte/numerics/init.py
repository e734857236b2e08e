"""Seeded initialisation.

All randomness goes through numpy's PCG64 bit generator so that a seed fully
determines every parameter and every synthetic dataset.
"""
from __future__ import annotations

import math

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)

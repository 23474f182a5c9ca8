"""Seeded per-joint Gaussian noise and reproducible stream derivation."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        value = int(key)
        if value < 0:
            raise ValueError("stream keys must be non-negative integers")
        return value
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed, *keys) -> np.random.Generator:
    """Deterministic generator for (seed, key path).

    Different key paths give statistically independent streams, and the
    same path always reproduces the same stream, regardless of execution
    order elsewhere. Keys may be ints or short labels.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def seed_keys(seed) -> tuple:
    """Normalize a seed argument (int or tuple of keys) to a key tuple."""
    if isinstance(seed, tuple):
        return seed
    return (seed,)


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean Gaussian perturbation with a per-joint standard deviation
    (radians) and a seed for standalone stream creation."""

    sigma: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        sigma = tuple(float(v) for v in self.sigma)
        if len(sigma) != 3:
            raise ValueError(f"sigma must have 3 entries, got {len(sigma)}")
        if any(v < 0.0 or not np.isfinite(v) for v in sigma):
            raise ValueError("sigma entries must be finite and non-negative")
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def isotropic(cls, sigma: float, seed: int = 0) -> "NoiseModel":
        """Same standard deviation on every joint."""
        return cls(sigma=(float(sigma),) * 3, seed=seed)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.array(self.sigma)

    def make_rng(self) -> np.random.Generator:
        return derive_rng(self.seed)

    def substream(self, *keys) -> np.random.Generator:
        return derive_rng(self.seed, *keys)


def perturb(noise: NoiseModel, q, rng: np.random.Generator) -> np.ndarray:
    """q plus one Gaussian draw per joint; the input is never mutated.

    A zero sigma entry leaves that joint untouched exactly (the draw still
    advances the stream, which keeps call sequences aligned across sigma
    settings).
    """
    q = np.asarray(q, dtype=float)
    return q + rng.normal(0.0, noise.sigma_array)

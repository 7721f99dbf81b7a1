"""Multiplicative log-normal device-variation injection and sweeps.

A stored value w is perturbed to w * exp(theta) with theta ~ Normal(0,
sigma^2). Weight-level injection draws one theta per weight (all of its
cells share the factor); cell-level injection draws an independent theta per
(bit split, weight) cell. A trial models one fabricated device instance, so
theta is resampled per trial, never per inference call.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .seeding import substream

__all__ = [
    "VariationLevel",
    "VariationSpec",
    "sample_theta",
    "apply_variation",
    "variation_sweep",
]


class VariationLevel(Enum):
    WEIGHT = "weight"
    CELL = "cell"

    @classmethod
    def parse(cls, name: str) -> "VariationLevel":
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(
                f"unknown variation level {name!r}; expected 'weight' or 'cell'"
            ) from None


@dataclass(frozen=True)
class VariationSpec:
    sigma: float
    level: VariationLevel = VariationLevel.WEIGHT
    seed: int = 0
    trials: int = 1

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def sample_theta(shape: tuple[int, ...], sigma: float, seed) -> np.ndarray:
    """I.i.d. Normal(0, sigma^2) draws, deterministic per seed.

    ``seed`` may be an integer or an already-constructed Generator (to draw
    several tensors from one trial stream).
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sigma * rng.standard_normal(shape)


def apply_variation(w: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Elementwise w * exp(theta)."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != w.shape:
        raise ValueError(f"theta shape {theta.shape} != value shape {w.shape}")
    return w * np.exp(theta)


def trial_rng(spec: VariationSpec, trial: int) -> np.random.Generator:
    """One RNG stream per (seed, trial index); parallel and serial runs agree."""
    return substream(spec.seed, "variation", trial)


def variation_sweep(evaluate_fn, sigmas, spec: VariationSpec) -> list[dict]:
    """Robustness table over noise levels.

    ``evaluate_fn(sigma, rng)`` must run one seeded evaluation (drawing theta
    from ``rng``) and return an accuracy. Returns one row per sigma with the
    mean and standard deviation over ``spec.trials`` trials.
    """
    rows = []
    for sigma in sigmas:
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        accs = np.array(
            [float(evaluate_fn(float(sigma), trial_rng(spec, t))) for t in range(spec.trials)]
        )
        rows.append(
            {
                "sigma": float(sigma),
                "mean_accuracy": float(accs.mean()),
                "std_accuracy": float(accs.std()),
                "trials": spec.trials,
            }
        )
    return rows

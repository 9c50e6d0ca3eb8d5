"""Discrete EDM noise grid, fraction-to-step lookup and the DDIM view of it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Index used for the terminal clean state (sigma exactly 0, outside the grid).
CLEAN = -1


@dataclass(frozen=True)
class Schedule:
    """Noise levels ``sigmas[t]`` for ``t = 0..steps``, ascending in ``t``.

    ``sigmas[0] == sigma_min`` and ``sigmas[steps] == sigma_max``. The clean
    state sits below the grid at index :data:`CLEAN` with sigma 0.
    """

    sigmas: tuple
    sigma_min: float
    sigma_max: float
    rho: float
    steps: int

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=float)
        if len(sig) != self.steps + 1:
            raise ValueError(f"expected {self.steps + 1} sigmas, got {len(sig)}")
        if not np.all(np.isfinite(sig)) or np.any(sig < 0):
            raise ValueError("sigmas must be finite and non-negative")
        if np.any(np.diff(sig) <= 0):
            raise ValueError("sigmas must be strictly increasing in t")

    @property
    def T(self) -> int:
        return self.steps

    def sigma(self, t: int) -> float:
        """Noise level at index ``t``; ``CLEAN`` maps to 0."""
        if t == CLEAN:
            return 0.0
        if not 0 <= t <= self.steps:
            raise IndexError(f"step {t} outside 0..{self.steps}")
        return self.sigmas[t]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=float)

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "rho": self.rho,
        }


@dataclass(frozen=True)
class DdimCoefficients:
    """``alphas[t] = 1 / (1 + sigma_t**2)`` for every grid entry.

    ``one_minus_alphas`` is stored separately rather than derived, since
    ``1 - alpha`` cancels catastrophically at small sigma.
    """

    alphas: tuple
    one_minus_alphas: tuple

    def alpha(self, t: int) -> float:
        return 1.0 if t == CLEAN else self.alphas[t]

    def one_minus_alpha(self, t: int) -> float:
        return 0.0 if t == CLEAN else self.one_minus_alphas[t]


def build_schedule(
    steps: int = 30, sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0
) -> Schedule:
    """Karras rho-warped grid, indexed so that sigma grows with ``t``.

    >>> build_schedule(1, 0.002, 80, 7).sigmas
    (0.002, 80.0)
    """
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    if not (sigma_min > 0 and sigma_max > 0 and rho > 0):
        raise ValueError("sigma_min, sigma_max and rho must be positive")
    if not sigma_min < sigma_max:
        raise ValueError(f"sigma_min ({sigma_min}) must be below sigma_max ({sigma_max})")
    steps = int(steps)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    frac = 1.0 - np.arange(steps + 1) / steps
    sig = (hi + frac * (lo - hi)) ** rho
    sig[0], sig[-1] = sigma_min, sigma_max
    return Schedule(
        sigmas=tuple(float(x) for x in sig),
        sigma_min=float(sigma_min),
        sigma_max=float(sigma_max),
        rho=float(rho),
        steps=steps,
    )


def step_for_fraction(s: Schedule, f: float) -> int:
    """Grid index whose sigma is closest to ``f * sigma_max``.

    Ties go to the larger index, so a request is never under-noised.
    """
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {f!r}")
    dist = np.abs(s.as_array() - f * s.sigma_max)
    best = dist.min()
    return int(np.flatnonzero(dist == best)[-1])


def to_ddim(s: Schedule) -> DdimCoefficients:
    sig2 = s.as_array() ** 2
    return DdimCoefficients(
        alphas=tuple(float(a) for a in 1.0 / (1.0 + sig2)),
        one_minus_alphas=tuple(float(b) for b in sig2 / (1.0 + sig2)),
    )


def sigmas_from_alphas(coeffs: DdimCoefficients) -> np.ndarray:
    a = np.asarray(coeffs.alphas, dtype=float)
    b = np.asarray(coeffs.one_minus_alphas, dtype=float)
    return np.sqrt(b / a)

"""Deterministic samplers over any ``D(z, sigma, condition)`` denoiser.

States are kept in EDM scaling (``z = x + sigma * eps``) throughout; the DDIM
routines convert to the variance-preserving view internally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .schedule import CLEAN, DdimCoefficients, Schedule


class SamplerError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """Visited states as ``(t, sigma_t, latent)``, first to last inclusive."""

    states: list = field(default_factory=list)

    def append(self, t: int, sigma: float, z: np.ndarray) -> None:
        self.states.append((int(t), float(sigma), z))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1][2]

    @property
    def steps(self) -> list[int]:
        return [s[0] for s in self.states]

    def at(self, t: int) -> np.ndarray:
        for step, _, z in self.states:
            if step == t:
                return z
        raise KeyError(t)

    def __len__(self):
        return len(self.states)

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for t, sigma, z in self.states:
                fh.write(json.dumps({"t": t, "sigma": sigma, "z": np.asarray(z).tolist()}) + "\n")


def cfg_denoise(d, z, sigma, condition, w: float):
    """Guided prediction ``D(z, s) + w * (D(z, s, c) - D(z, s))``."""
    if w < 0:
        raise ValueError("guidance weight must be non-negative")
    if condition is None or w == 0:
        return d(z, sigma, None)
    cond = d(z, sigma, condition)
    if w == 1:
        return cond
    uncond = d(z, sigma, None)
    return uncond + w * (cond - uncond)


def _check_finite(z, t):
    if not np.all(np.isfinite(z)):
        raise SamplerError(f"non-finite state produced at step {t}")


def _check_span(s_steps: int, t_from: int, t_to: int):
    for t in (t_from, t_to):
        if not CLEAN <= t <= s_steps:
            raise IndexError(f"step {t} outside {CLEAN}..{s_steps}")


def edm_sample(
    d,
    s: Schedule,
    z_start,
    t_start: int,
    t_end: int = CLEAN,
    condition=None,
    w: float = 1.0,
    solver: str = "euler",
    on_step=None,
) -> Trajectory:
    """Integrate the probability-flow ODE down the grid from ``t_start`` to ``t_end``.

    ``t_end = CLEAN`` lands the last step on sigma exactly 0. ``on_step(t, z)``
    may return a replacement state after each step (used for clamping).
    """
    _check_span(s.steps, t_start, t_end)
    if t_end > t_start:
        raise ValueError("edm_sample runs downward: t_end must not exceed t_start")
    if solver not in ("euler", "heun"):
        raise ValueError(f"unknown solver {solver!r}")
    z = np.array(z_start, dtype=float)
    traj = Trajectory()
    traj.append(t_start, s.sigma(t_start), z)
    for t in range(t_start, t_end, -1):
        sig, sig_next = s.sigma(t), s.sigma(t - 1)
        slope = (z - cfg_denoise(d, z, sig, condition, w)) / sig
        z_next = z + (sig_next - sig) * slope
        if solver == "heun" and sig_next > 0:
            slope2 = (z_next - cfg_denoise(d, z_next, sig_next, condition, w)) / sig_next
            z_next = z + (sig_next - sig) * 0.5 * (slope + slope2)
        _check_finite(z_next, t - 1)
        if on_step is not None:
            replaced = on_step(t - 1, z_next)
            if replaced is not None:
                z_next = replaced
        z = z_next
        traj.append(t - 1, sig_next, z)
    return traj


def ddim_step(d, coeffs: DdimCoefficients, z, t_from: int, t_to: int, condition=None, w: float = 0.0):
    """One deterministic DDIM move between grid indices, in either direction.

    The noise estimate is taken at the source level; leaving the clean state
    (``t_from = CLEAN``) uses the destination level instead, where it is
    defined.
    """
    if t_from == t_to:
        return np.array(z, dtype=float)
    a_from, b_from = coeffs.alpha(t_from), coeffs.one_minus_alpha(t_from)
    a_to, b_to = coeffs.alpha(t_to), coeffs.one_minus_alpha(t_to)
    z = np.asarray(z, dtype=float)
    if b_from == 0.0:
        a_eval, b_eval = a_to, b_to
    else:
        a_eval, b_eval = a_from, b_from
    sigma_eval = np.sqrt(b_eval / a_eval)
    x0 = cfg_denoise(d, z, sigma_eval, condition, w)
    # VP state x = sqrt(alpha) * z; eps from the evaluation level
    eps = (np.sqrt(a_eval) * z - np.sqrt(a_eval) * x0) / np.sqrt(b_eval)
    x_to = np.sqrt(a_to) * x0 + np.sqrt(b_to) * eps
    return x_to / np.sqrt(a_to)


def ddim_sample(d, coeffs: DdimCoefficients, z, t_from: int, t_to: int = CLEAN, condition=None, w: float = 0.0):
    """Deterministic DDIM walk from ``t_from`` to ``t_to`` (either direction)."""
    steps = len(coeffs.alphas) - 1
    _check_span(steps, t_from, t_to)
    sigmas = lambda t: 0.0 if t == CLEAN else float(np.sqrt(coeffs.one_minus_alphas[t] / coeffs.alphas[t]))
    z = np.array(z, dtype=float)
    traj = Trajectory()
    traj.append(t_from, sigmas(t_from), z)
    direction = -1 if t_to < t_from else 1
    for t in range(t_from, t_to, direction):
        z = ddim_step(d, coeffs, z, t, t + direction, condition, w)
        _check_finite(z, t + direction)
        traj.append(t + direction, sigmas(t + direction), z)
    return traj


def ddim_invert(d, coeffs: DdimCoefficients, z0, t_to: int, condition=None, w: float = 0.0) -> Trajectory:
    """Run DDIM upward from the clean latent to ``t_to``, keeping every state.

    ``t_to = CLEAN`` inverts zero steps.
    """
    return ddim_sample(d, coeffs, z0, CLEAN, t_to, condition, w)

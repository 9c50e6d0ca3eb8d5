"""Synthetic labeled latent world.

Every frame is drawn from an isotropic Gaussian mixture with one component per
(instrument, pitch) pair. Timbre channels carry instrument-only means,
structure channels pitch-only means, and shared channels blend an instrument
term with a per-(instrument, pitch) interaction term whose weight is the
entanglement knob.
Because the mixture is known, the posterior-mean denoiser and the label
decoders are exact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WorldSpec:
    """Mixture parameters. ``component_means`` has shape (I, P, C)."""

    channels: int
    instruments: int
    pitches: int
    timbre_channels: tuple
    structure_channels: tuple
    shared_channels: tuple
    component_means: np.ndarray = field(repr=False)
    component_std: float
    entanglement: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        means = np.asarray(self.component_means, dtype=float)
        if means.shape != (self.instruments, self.pitches, self.channels):
            raise ValueError(
                f"component_means must have shape {(self.instruments, self.pitches, self.channels)}, "
                f"got {means.shape}"
            )
        if not self.component_std > 0:
            raise ValueError("component_std must be positive")
        if not 0.0 <= self.entanglement <= 1.0:
            raise ValueError("entanglement must lie in [0, 1]")
        tim, stru, sha = map(set, (self.timbre_channels, self.structure_channels, self.shared_channels))
        if tim & stru:
            raise ValueError("timbre and structure channels overlap")
        if not (tim | stru | sha) <= set(range(self.channels)):
            raise ValueError("channel index out of range")
        means.setflags(write=False)
        object.__setattr__(self, "component_means", means)

    @property
    def n_components(self) -> int:
        return self.instruments * self.pitches

    @property
    def flat_means(self) -> np.ndarray:
        """Component means as (I*P, C); row ``i * P + p``."""
        return self.component_means.reshape(self.n_components, self.channels)

    @property
    def pitch_channels(self) -> np.ndarray:
        """Channels the pitch decoder may look at."""
        return np.array(sorted(set(self.structure_channels) | set(self.shared_channels)), dtype=int)

    def mixture_mean(self) -> np.ndarray:
        return self.component_means.mean(axis=(0, 1))

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "instruments": self.instruments,
            "pitches": self.pitches,
            "timbre_channels": list(self.timbre_channels),
            "structure_channels": list(self.structure_channels),
            "shared_channels": list(self.shared_channels),
            "component_means": self.component_means.tolist(),
            "component_std": self.component_std,
            "entanglement": self.entanglement,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        return cls(
            channels=int(d["channels"]),
            instruments=int(d["instruments"]),
            pitches=int(d["pitches"]),
            timbre_channels=tuple(int(c) for c in d["timbre_channels"]),
            structure_channels=tuple(int(c) for c in d["structure_channels"]),
            shared_channels=tuple(int(c) for c in d.get("shared_channels", ())),
            component_means=np.asarray(d["component_means"], dtype=float),
            component_std=float(d["component_std"]),
            entanglement=float(d.get("entanglement", 0.0)),
            seed=d.get("seed"),
        )


@dataclass(frozen=True, eq=False)
class LatentClip:
    """A C x T latent with its instrument label and per-frame pitch track."""

    data: np.ndarray
    instrument: int
    pitch_track: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        track = np.asarray(self.pitch_track, dtype=int)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValueError(f"clip data must be C x T with T >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("clip data contains non-finite entries")
        if track.shape != (data.shape[1],):
            raise ValueError("pitch_track length must equal the number of frames")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pitch_track", track)

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def to_dict(self) -> dict:
        return {
            "data": self.data.tolist(),
            "instrument": int(self.instrument),
            "pitch_track": self.pitch_track.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentClip":
        return cls(np.asarray(d["data"], dtype=float), int(d["instrument"]), np.asarray(d["pitch_track"]))


@dataclass(frozen=True)
class DatasetRecord:
    z: tuple
    inst: int
    pitch: int


def _standardize(codes: np.ndarray) -> np.ndarray:
    # zero mean, unit std across classes, per column
    codes = codes - codes.mean(axis=0)
    return codes / codes.std(axis=0)


def make_world(
    channels: int = 64,
    instruments: int = 8,
    pitches: int = 16,
    n_timbre: int = 16,
    n_structure: int = 16,
    n_shared: int = 24,
    entanglement: float = 1.0,
    component_std: float = 6.0,
    separation: float = 4.0,
    pitch_share: tuple = (0.2, 0.9),
    interaction: float = 0.5,
    seed: int = 0,
) -> WorldSpec:
    """Draw a planted world.

    Channel roles are assigned by a seeded permutation. Mean entries are
    standard normal draws, standardized per channel across classes and
    rescaled so that on every planted channel the RMS gap between two classes
    is ``separation * component_std``.
    Shared channel ``j`` splits its variance between an instrument code and a
    pitch code, the pitch share rising evenly across ``pitch_share``; the
    pitch code is itself blended with a per-(instrument, pitch) code of
    weight ``interaction``. ``entanglement`` scales the variance of all
    shared channels, so at 0 they are as empty as the null channels.
    """
    if not 0.0 <= interaction <= 1.0:
        raise ValueError("interaction must lie in [0, 1]")
    if n_timbre + n_structure + n_shared > channels:
        raise ValueError("more planted channels than channels")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(channels)
    tim = np.sort(perm[:n_timbre])
    stru = np.sort(perm[n_timbre : n_timbre + n_structure])
    sha = perm[n_timbre + n_structure : n_timbre + n_structure + n_shared]

    scale = separation * component_std / math.sqrt(2.0)
    by_inst = _standardize(rng.standard_normal((instruments, n_timbre)))
    by_pitch = _standardize(rng.standard_normal((pitches, n_structure)))
    shared_inst = _standardize(rng.standard_normal((instruments, n_shared)))
    shared_pitch = _standardize(rng.standard_normal((pitches, n_shared)))
    shared_pair = _standardize(rng.standard_normal((instruments * pitches, n_shared))).reshape(
        instruments, pitches, n_shared
    )

    means = np.zeros((instruments, pitches, channels))
    means[:, :, tim] = scale * by_inst[:, None, :]
    means[:, :, stru] = scale * by_pitch[None, :, :]
    lam = float(entanglement)
    beta = np.linspace(pitch_share[0], pitch_share[1], n_shared) if n_shared else np.zeros(0)
    pitch_code = math.sqrt(1.0 - interaction) * shared_pitch[None, :, :] + math.sqrt(interaction) * shared_pair
    mixed = np.sqrt(1.0 - beta) * shared_inst[:, None, :] + np.sqrt(beta) * pitch_code
    means[:, :, sha] = scale * math.sqrt(lam) * mixed
    return WorldSpec(
        channels=channels,
        instruments=instruments,
        pitches=pitches,
        timbre_channels=tuple(int(c) for c in tim),
        structure_channels=tuple(int(c) for c in stru),
        shared_channels=tuple(int(c) for c in np.sort(sha)),
        component_means=means,
        component_std=float(component_std),
        entanglement=lam,
        seed=seed,
    )


def _pitch_track(rng: np.random.Generator, frames: int, pitches: int, mean_segment: float) -> np.ndarray:
    track = np.empty(frames, dtype=int)
    p = int(rng.integers(pitches))
    t = 0
    while t < frames:
        n = int(rng.geometric(1.0 / mean_segment))
        track[t : t + n] = p
        t += n
        if pitches > 1:
            # a new segment always changes pitch, so every boundary is an onset
            p = int((p + rng.integers(1, pitches)) % pitches)
    return track


def sample_clip(
    w: WorldSpec,
    frames: int,
    rng_seed,
    instrument: int | None = None,
    mean_segment: float = 8.0,
) -> LatentClip:
    """Draw one clip. The instrument is uniform unless given."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    rng = np.random.default_rng(rng_seed)
    inst = int(rng.integers(w.instruments)) if instrument is None else int(instrument)
    track = _pitch_track(rng, frames, w.pitches, mean_segment)
    noise = rng.standard_normal((w.channels, frames))
    data = w.component_means[inst, track].T + w.component_std * noise
    return LatentClip(data, inst, track)


def sample_frames(w: WorldSpec, n: int, rng_seed, instrument: int | None = None):
    """i.i.d. labeled frames. Returns ``(frames (n, C), inst (n,), pitch (n,))``."""
    rng = np.random.default_rng(rng_seed)
    if instrument is None:
        inst = rng.integers(w.instruments, size=n)
    else:
        inst = np.full(n, int(instrument))
    pitch = rng.integers(w.pitches, size=n)
    z = w.component_means[inst, pitch] + w.component_std * rng.standard_normal((n, w.channels))
    return z, inst, pitch


def _as_frames(z: np.ndarray, channels: int) -> tuple[np.ndarray, tuple]:
    """(..., C, T) -> (N, C) frames plus the shape needed to undo it."""
    z = np.asarray(z, dtype=float)
    if z.ndim < 2 or z.shape[-2] != channels:
        raise ValueError(f"expected (..., {channels}, T) latents, got shape {z.shape}")
    moved = np.moveaxis(z, -2, -1)
    return moved.reshape(-1, channels), moved.shape


def _frame_conditions(condition, lead_shape: tuple, frames: int) -> np.ndarray | None:
    """Broadcast a condition (None, int, or one entry per leading item) to frames.

    Negative entries mean unconditional.
    """
    if condition is None:
        return None
    cond = np.asarray(condition, dtype=int)
    if cond.ndim == 0:
        cond = np.full(lead_shape, int(cond))
    cond = np.broadcast_to(cond.reshape(cond.shape + (1,) * (len(lead_shape) - cond.ndim)), lead_shape)
    out = np.repeat(cond.reshape(-1), frames)
    return None if np.all(out < 0) else out


def denoise_oracle(w: WorldSpec, z: np.ndarray, sigma: float, condition=None) -> np.ndarray:
    """Exact posterior mean ``E[x | x + sigma * eps = z]`` under the mixture.

    ``z`` is a C x T latent or a stack (..., C, T). ``condition`` restricts the
    prior to components of that instrument; it may be an int or an array with
    one entry per stacked latent (negative entries stay unconditional).
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    z = np.asarray(z, dtype=float)
    if sigma == 0:
        return z.copy()
    flat, moved_shape = _as_frames(z, w.channels)
    frames = moved_shape[-2]
    tau2 = w.component_std**2
    var = tau2 + sigma**2
    mu = w.flat_means
    # ||z - mu||^2 without the ||z||^2 term, which is constant per row
    logits = (flat @ mu.T - 0.5 * np.sum(mu**2, axis=1)) / var
    cond = _frame_conditions(condition, moved_shape[:-2], frames)
    if cond is not None:
        comp_inst = np.repeat(np.arange(w.instruments), w.pitches)
        blocked = (cond[:, None] >= 0) & (comp_inst[None, :] != cond[:, None])
        logits = np.where(blocked, -np.inf, logits)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    post_mu = weights @ mu
    out = (tau2 * flat + sigma**2 * post_mu) / var
    return np.moveaxis(out.reshape(moved_shape), -1, -2)


class MixtureDenoiser:
    """Callable ``D(z, sigma, condition)`` bound to a world."""

    def __init__(self, world: WorldSpec):
        self.world = world

    def __call__(self, z, sigma, condition=None):
        return denoise_oracle(self.world, z, sigma, condition)


def _frame_log_lik(w: WorldSpec, frames: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Per-frame, per-component log-likelihood up to a per-frame constant. Shape (N, I, P)."""
    mu = w.flat_means
    if cols is not None:
        frames, mu = frames[:, cols], mu[:, cols]
    ll = (frames @ mu.T - 0.5 * np.sum(mu**2, axis=1)) / w.component_std**2
    return ll.reshape(-1, w.instruments, w.pitches)


def decode_pitch(w: WorldSpec, clip: np.ndarray) -> np.ndarray:
    """Bayes pitch per frame from structure and shared channels only.

    Accepts a C x T latent (returns length T) or a stack (..., C, T).
    """
    flat, moved_shape = _as_frames(clip, w.channels)
    ll = _frame_log_lik(w, flat, w.pitch_channels)
    pitch = np.argmax(logsumexp(ll, axis=1), axis=1)
    return pitch.reshape(moved_shape[:-1])


def instrument_posterior(w: WorldSpec, clip: np.ndarray) -> np.ndarray:
    """Per-frame P(instrument | frame), shape (..., T, I)."""
    flat, moved_shape = _as_frames(clip, w.channels)
    ll = logsumexp(_frame_log_lik(w, flat), axis=2)
    post = np.exp(ll - logsumexp(ll, axis=1, keepdims=True))
    return post.reshape(moved_shape[:-1] + (w.instruments,))


def class_posterior(w: WorldSpec, clip: np.ndarray, instrument) -> np.ndarray | float:
    """Mean over frames of P(instrument | frame).

    For a stack of clips, ``instrument`` may hold one class per clip and the
    result is one value per clip.
    """
    inst = np.asarray(instrument)
    if np.any(inst < 0) or np.any(inst >= w.instruments):
        raise ValueError(f"instrument index out of range 0..{w.instruments - 1}")
    post = instrument_posterior(w, clip)
    if post.ndim == 2:
        return float(post[:, int(inst)].mean())
    inst = np.broadcast_to(inst, post.shape[:-2])
    picked = np.take_along_axis(post, inst[..., None, None].repeat(post.shape[-2], axis=-2), axis=-1)
    return picked[..., 0].mean(axis=-1)


def save_world(w: WorldSpec, path) -> None:
    Path(path).write_text(json.dumps(w.to_dict()))


def load_world(path) -> WorldSpec:
    return WorldSpec.from_dict(json.loads(Path(path).read_text()))


def records_from_frames(frames, inst, pitch) -> list[DatasetRecord]:
    return [DatasetRecord(tuple(map(float, z)), int(i), int(p)) for z, i, p in zip(frames, inst, pitch)]


def save_dataset(path, records) -> None:
    """JSON Lines, one ``{"z": [...], "inst": i, "pitch": p}`` per frame.

    ``repr`` of a float is the shortest round-tripping form, so reading back
    is bit-exact.
    """
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"z": [float(x) for x in r.z], "inst": int(r.inst), "pitch": int(r.pitch)}))
            fh.write("\n")


def load_dataset(path) -> list[DatasetRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(DatasetRecord(tuple(float(x) for x in obj["z"]), int(obj["inst"]), int(obj["pitch"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad dataset record ({exc})") from exc
    return out

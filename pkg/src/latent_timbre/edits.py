"""Timbre-editing strategies on top of the deterministic samplers.

All functions accept a single C x T context or a stack (B, C, T); ``target``
and ``seed`` may then be given per item. Each item draws its noise from its
own seed, so batching never changes a result.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .mi import ChannelMask, MutualInfoChannelSelector
from .sampler import Trajectory, ddim_invert, edm_sample
from .schedule import CLEAN, Schedule, build_schedule, step_for_fraction, to_ddim

STRATEGIES = ("pni", "ddim_pni", "ddim_inversion", "mi_inpaint")
_ALIASES = {
    "pni": "pni",
    "ddimpni": "ddim_pni",
    "ddim-pni": "ddim_pni",
    "ddim_pni": "ddim_pni",
    "ddiminversion": "ddim_inversion",
    "ddim-inversion": "ddim_inversion",
    "ddim_inversion": "ddim_inversion",
    "miinpaint": "mi_inpaint",
    "mi-inpaint": "mi_inpaint",
    "mi_inpaint": "mi_inpaint",
}
CLAMP_RULES = ("steps", "sigma")


def canonical_strategy(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGIES}") from None


@dataclass(frozen=True)
class EditConfig:
    strategy: str
    target_instrument: int | None = None
    k: float | None = None
    f_clamp: float | None = None
    f_par: float | None = None
    steps: int = 30
    cfg_weight: float = 1.25
    seed: int = 0
    clamp_rule: str = "steps"

    def __post_init__(self):
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))
        for name in ("k", "f_clamp", "f_par"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
        if self.strategy in ("pni", "ddim_pni") and self.f_par is None:
            raise ValueError(f"{self.strategy} needs f_par")
        if self.strategy == "mi_inpaint" and (self.k is None or self.f_clamp is None):
            raise ValueError("mi_inpaint needs k and f_clamp")
        if self.clamp_rule not in CLAMP_RULES:
            raise ValueError(f"clamp_rule must be one of {CLAMP_RULES}")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EditResult:
    output: np.ndarray
    config: EditConfig
    trajectory: Trajectory | None = None
    context_trajectory: Trajectory | None = None
    seconds: float = 0.0
    info: dict = field(default_factory=dict)


def clamp_end_step(s: Schedule, f_clamp: float, rule: str = "steps") -> int:
    """Lowest grid index at which a clamped step still starts.

    ``"steps"`` clamps the first ``round(f_clamp * T)`` solver steps, so a
    larger fraction clamps for longer. ``"sigma"`` picks the index whose sigma
    is nearest ``f_clamp * sigma_max``, so there a larger fraction clamps for
    less. Returning ``T + 1`` means no step is clamped.
    """
    if rule == "steps":
        n = int(np.floor(f_clamp * s.steps + 0.5))
        return s.steps + 1 - n if n > 0 else s.steps + 1
    if rule == "sigma":
        return 0 if f_clamp == 0 else step_for_fraction(s, f_clamp)
    raise ValueError(f"unknown clamp rule {rule!r}")


def _noise(seed, shape) -> np.ndarray:
    """One standard-normal draw per item, each from its own seed."""
    seeds = np.atleast_1d(np.asarray(seed))
    if len(shape) == 2:
        return np.random.default_rng(int(seeds[0])).standard_normal(shape)
    seeds = np.broadcast_to(seeds, shape[:1])
    return np.stack([np.random.default_rng(int(sd)).standard_normal(shape[1:]) for sd in seeds])


def _timer():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


def _target(cfg: EditConfig, target):
    t = cfg.target_instrument if target is None else target
    if t is None:
        raise ValueError("no target instrument given")
    return t


def edit_pni(ctx, cfg: EditConfig, d, s: Schedule, target=None, seed=None, keep_trajectory=False) -> EditResult:
    """Add ``sigma_{t_f}`` noise to every channel, then denoise toward the target."""
    elapsed = _timer()
    ctx = np.asarray(ctx, dtype=float)
    t_f = step_for_fraction(s, cfg.f_par)
    z = ctx + s.sigma(t_f) * _noise(cfg.seed if seed is None else seed, ctx.shape)
    traj = edm_sample(d, s, z, t_f, CLEAN, _target(cfg, target), cfg.cfg_weight)
    return EditResult(traj.final, cfg, traj if keep_trajectory else None, None, elapsed(), {"t_f": t_f})


def edit_ddim_pni(ctx, cfg: EditConfig, d, s: Schedule, target=None, seed=None, keep_trajectory=False) -> EditResult:
    """Invert (unguided) to ``t_f`` only, then denoise toward the target."""
    elapsed = _timer()
    t_f = step_for_fraction(s, cfg.f_par)
    inv = ddim_invert(d, to_ddim(s), ctx, t_f)
    traj = edm_sample(d, s, inv.final, t_f, CLEAN, _target(cfg, target), cfg.cfg_weight)
    keep = keep_trajectory
    return EditResult(traj.final, cfg, traj if keep else None, inv if keep else None, elapsed(), {"t_f": t_f})


def edit_ddim_inversion(ctx, cfg: EditConfig, d, s: Schedule, target=None, seed=None, keep_trajectory=False) -> EditResult:
    """Invert (unguided) all the way to ``T``, then denoise toward the target."""
    elapsed = _timer()
    inv = ddim_invert(d, to_ddim(s), ctx, s.steps)
    traj = edm_sample(d, s, inv.final, s.steps, CLEAN, _target(cfg, target), cfg.cfg_weight)
    keep = keep_trajectory
    return EditResult(traj.final, cfg, traj if keep else None, inv if keep else None, elapsed(), {"t_f": s.steps})


def edit_mi_inpaint(
    ctx, cfg: EditConfig, d, s: Schedule, mask: ChannelMask, target=None, seed=None, keep_trajectory=False
) -> EditResult:
    """Fresh noise on timbre channels, inverted context on structure channels.

    Structure channels are re-imposed from the cached inversion trajectory
    after every solver step that starts at or above the clamp-end index, then
    the sampler runs free to the clean state.
    """
    elapsed = _timer()
    if cfg.k is not None and not np.isclose(mask.k, cfg.k):
        raise ValueError(f"mask was built for k={mask.k}, config asks for k={cfg.k}")
    ctx = np.asarray(ctx, dtype=float)
    tim = np.asarray(mask.timbre, dtype=float)
    if tim.shape != (ctx.shape[-2],):
        raise ValueError(f"mask covers {tim.shape[0]} channels, latents have {ctx.shape[-2]}")
    tim = tim[:, None]
    struct = 1.0 - tim
    inv = ddim_invert(d, to_ddim(s), ctx, s.steps)
    ctx_states = {t: z for t, _, z in inv.states}
    t_c = clamp_end_step(s, cfg.f_clamp, cfg.clamp_rule)

    eps = _noise(cfg.seed if seed is None else seed, ctx.shape)
    z_T = s.sigma_max * eps * tim + ctx_states[s.steps] * struct

    def clamp(t_landed, z):
        # the step that lands on t_landed started at t_landed + 1
        if t_landed + 1 >= t_c:
            return z * tim + ctx_states[t_landed] * struct
        return None

    traj = edm_sample(d, s, z_T, s.steps, CLEAN, _target(cfg, target), cfg.cfg_weight, on_step=clamp)
    keep = keep_trajectory
    return EditResult(traj.final, cfg, traj if keep else None, inv if keep else None, elapsed(), {"t_c": t_c})


def run_edit(ctx, cfg: EditConfig, d, s: Schedule | None = None, mask: ChannelMask | None = None, **kw) -> EditResult:
    """Dispatch on ``cfg.strategy``; builds the default schedule for ``cfg.steps`` if none given."""
    s = build_schedule(cfg.steps) if s is None else s
    if cfg.strategy == "pni":
        return edit_pni(ctx, cfg, d, s, **kw)
    if cfg.strategy == "ddim_pni":
        return edit_ddim_pni(ctx, cfg, d, s, **kw)
    if cfg.strategy == "ddim_inversion":
        return edit_ddim_inversion(ctx, cfg, d, s, **kw)
    if mask is None:
        raise ValueError("mi_inpaint needs a channel mask")
    return edit_mi_inpaint(ctx, cfg, d, s, mask, **kw)


class TimbreEditor(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the editing strategies.

    ``fit(frames, instruments)`` learns the MI channel mask (needed only by
    ``mi_inpaint``); ``transform(contexts, target=..., seed=...)`` returns the
    edited latents with the same shape as the input.

    Parameters
    ----------
    denoiser : callable
        ``D(z, sigma, condition)``.
    """

    def __init__(
        self,
        denoiser=None,
        strategy: str = "mi_inpaint",
        k: float = 0.5,
        f_clamp: float = 0.45,
        f_par: float = 0.5,
        steps: int = 30,
        cfg_weight: float = 1.25,
        sigma_min: float = 0.002,
        sigma_max: float = 80.0,
        rho: float = 7.0,
        clamp_rule: str = "steps",
        bins: int = 16,
        seed: int = 0,
    ):
        self.denoiser = denoiser
        self.strategy = strategy
        self.k = k
        self.f_clamp = f_clamp
        self.f_par = f_par
        self.steps = steps
        self.cfg_weight = cfg_weight
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.rho = rho
        self.clamp_rule = clamp_rule
        self.bins = bins
        self.seed = seed

    def _config(self, target) -> EditConfig:
        strategy = canonical_strategy(self.strategy)
        return EditConfig(
            strategy=strategy,
            target_instrument=target,
            k=self.k if strategy == "mi_inpaint" else None,
            f_clamp=self.f_clamp if strategy == "mi_inpaint" else None,
            f_par=self.f_par if strategy in ("pni", "ddim_pni") else None,
            steps=self.steps,
            cfg_weight=self.cfg_weight,
            seed=self.seed,
            clamp_rule=self.clamp_rule,
        )

    def fit(self, X=None, y=None, pitch=None):
        if self.denoiser is None:
            raise ValueError("TimbreEditor needs a denoiser")
        self.schedule_ = build_schedule(self.steps, self.sigma_min, self.sigma_max, self.rho)
        self.mask_ = None
        if canonical_strategy(self.strategy) == "mi_inpaint":
            if X is None or y is None:
                raise ValueError("mi_inpaint needs labeled frames to build its channel mask")
            self.selector_ = MutualInfoChannelSelector(self.k, self.bins).fit(X, y, pitch=pitch)
            self.mask_ = self.selector_.mask_
        return self

    def transform(self, X, target=None, seed=None):
        if not hasattr(self, "schedule_"):
            self.fit()
        cfg = self._config(target)
        result = run_edit(X, cfg, self.denoiser, self.schedule_, self.mask_, target=target, seed=seed)
        return result.output

"""Metric analogs, evaluation of edit batches and the hyperparameter grid."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .edits import EditConfig, canonical_strategy, run_edit
from .mi import analyze, build_mask
from .schedule import Schedule
from .world import MixtureDenoiser, WorldSpec, class_posterior, decode_pitch, sample_clip, sample_frames

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "k", "f", "fad_analog", "dpd_analog", "class_sim", "onset_f1")


def _covariance(x: np.ndarray) -> np.ndarray:
    cov = np.cov(x, rowvar=False)
    return 0.5 * (cov + cov.T)


def frechet_gaussian(set_a, set_b) -> float:
    """Frechet distance between Gaussian fits of two frame sets (rows are frames).

    Returns ``d``, not ``d**2``.
    """
    a, b = np.asarray(set_a, dtype=float), np.asarray(set_b, dtype=float)
    dim = a.shape[1]
    if b.shape[1] != dim:
        raise ValueError("frame sets have different widths")
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least {dim + 1} frames per set for a full-rank covariance")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    ca, cb = _covariance(a), _covariance(b)
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(np.sum((ma - mb) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean))
    return float(np.sqrt(max(d2, 0.0)))


def onset_frames(track) -> np.ndarray:
    track = np.asarray(track)
    return np.flatnonzero(track[1:] != track[:-1]) + 1


def onset_f1(pred_pitch, true_pitch, tol: int = 1) -> float:
    """F1 of pitch-change frames, greedily matched one-to-one within ``tol`` frames."""
    pred_pitch, true_pitch = np.asarray(pred_pitch), np.asarray(true_pitch)
    if pred_pitch.shape != true_pitch.shape:
        raise ValueError("pitch tracks differ in length")
    pred, true = onset_frames(pred_pitch), onset_frames(true_pitch)
    if len(pred) == 0 and len(true) == 0:
        return 1.0
    if len(pred) == 0 or len(true) == 0:
        return 0.0
    used = np.zeros(len(pred), dtype=bool)
    hits = 0
    for t in true:
        gaps = np.abs(pred - t)
        gaps = np.where(used | (gaps > tol), np.iinfo(int).max, gaps)
        j = int(np.argmin(gaps))
        if gaps[j] <= tol:
            used[j] = True
            hits += 1
    if hits == 0:
        return 0.0
    precision, recall = hits / len(pred), hits / len(true)
    return 2 * precision * recall / (precision + recall)


def dpd_analog(pred_pitch, true_pitch) -> float:
    """Mean absolute pitch-class distance per frame."""
    pred_pitch, true_pitch = np.asarray(pred_pitch), np.asarray(true_pitch)
    if pred_pitch.shape != true_pitch.shape:
        raise ValueError("pitch tracks differ in length")
    return float(np.mean(np.abs(pred_pitch.astype(float) - true_pitch)))


@dataclass
class MetricsReport:
    fad_analog: float
    class_sim: float
    dpd_analog: float
    onset_f1: float
    n_clips: int
    per_clip: dict = field(default_factory=dict, repr=False)

    def to_dict(self, with_per_clip: bool = False) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "per_clip"}
        if with_per_clip:
            out["per_clip"] = {k: np.asarray(v).tolist() for k, v in self.per_clip.items()}
        return out


def evaluate_edit(outputs, sources, w: WorldSpec, target, reference_seed=0) -> MetricsReport:
    """Score edited latents against their sources.

    ``outputs`` is (B, C, T) or a list of C x T arrays; ``sources`` the
    matching :class:`LatentClip` list; ``target`` one instrument or one per
    clip. The FAD reference is one fresh target-class clip per output.
    """
    outputs = np.asarray([np.asarray(o) for o in outputs], dtype=float)
    if len(outputs) == 0:
        raise ValueError("nothing to evaluate")
    if len(sources) != len(outputs):
        raise ValueError("need one source clip per output")
    targets = np.broadcast_to(np.asarray(target, dtype=int), (len(outputs),))
    frames = outputs.shape[-1]

    ref_rng = np.random.SeedSequence(reference_seed)
    ref_seeds = ref_rng.generate_state(len(outputs))
    reference = np.stack(
        [sample_clip(w, frames, int(sd), instrument=int(t)).data for sd, t in zip(ref_seeds, targets)]
    )

    pitch = decode_pitch(w, outputs)
    sims = np.asarray(class_posterior(w, outputs, targets), dtype=float)
    dpd = np.array([dpd_analog(p, src.pitch_track) for p, src in zip(pitch, sources)])
    f1 = np.array([onset_f1(p, src.pitch_track) for p, src in zip(pitch, sources)])

    flat = lambda x: np.moveaxis(x, -2, -1).reshape(-1, w.channels)
    if outputs.shape[0] * frames > w.channels:
        fad = frechet_gaussian(flat(outputs), flat(reference))
    else:
        warnings.warn("too few frames for a full-rank covariance; fad_analog is NaN", RuntimeWarning)
        fad = float("nan")
    return MetricsReport(
        fad_analog=fad,
        class_sim=float(sims.mean()),
        dpd_analog=float(dpd.mean()),
        onset_f1=float(f1.mean()),
        n_clips=len(outputs),
        per_clip={"class_sim": sims, "dpd_analog": dpd, "onset_f1": f1},
    )


@dataclass
class EvalSet:
    """Paired context/target draws shared by every cell of a grid."""

    clips: list
    targets: np.ndarray
    edit_seeds: np.ndarray

    @property
    def contexts(self) -> np.ndarray:
        return np.stack([c.data for c in self.clips])


def make_eval_set(w: WorldSpec, n_clips: int, frames: int, master_seed: int) -> EvalSet:
    ss = np.random.SeedSequence(master_seed)
    clip_ss, target_ss, edit_ss = ss.spawn(3)
    clip_seeds = clip_ss.generate_state(n_clips)
    clips = [sample_clip(w, frames, int(sd)) for sd in clip_seeds]
    rng = np.random.default_rng(target_ss)
    # uniform over the instruments other than the source
    shift = rng.integers(1, w.instruments, size=n_clips)
    targets = (np.array([c.instrument for c in clips]) + shift) % w.instruments
    return EvalSet(clips, targets, edit_ss.generate_state(n_clips).astype(np.int64))


@dataclass
class GridRow:
    method: str
    k: float | None
    f: float | None
    metrics: MetricsReport | None
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.method, self.k, self.f)


@dataclass
class GridResult:
    rows: list
    config: dict = field(default_factory=dict)

    def row(self, method: str, k=None, f=None) -> GridRow:
        for r in self.rows:
            if r.key == (canonical_strategy(method), k, f):
                return r
        raise KeyError((method, k, f))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        fmt = lambda v: "" if v is None else repr(float(v))
        for r in self.rows:
            m = r.metrics
            if m is None:
                wr.writerow([r.method, fmt(r.k), fmt(r.f), "", "", "", ""])
                continue
            wr.writerow([r.method, fmt(r.k), fmt(r.f)] + [fmt(getattr(m, c)) for c in REPORT_COLUMNS[3:]])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            rows.append(
                {
                    "method": r.method,
                    "k": r.k,
                    "f": r.f,
                    "metrics": None if r.metrics is None else r.metrics.to_dict(),
                    "error": r.error,
                }
            )
        return json.dumps({"config": self.config, "rows": rows}, indent=1, sort_keys=True)


INPAINT_SETTINGS = ((0.55, 0.40), (0.55, 0.45), (0.50, 0.40), (0.50, 0.45), (0.45, 0.40), (0.45, 0.45))


def comparison_grid(f_par: float = 0.5, settings=INPAINT_SETTINGS) -> list[dict]:
    """Three baselines followed by the MI-inpainting (k, f_clamp) settings."""
    grid = [
        {"strategy": "pni", "f_par": f_par},
        {"strategy": "ddim_pni", "f_par": f_par},
        {"strategy": "ddim_inversion"},
    ]
    grid += [{"strategy": "mi_inpaint", "k": k, "f_clamp": f} for k, f in settings]
    return grid


def _cell_config(strategy: str, params: dict, base: dict) -> EditConfig:
    strategy = canonical_strategy(strategy)
    kw = {k: v for k, v in {**base, **params}.items() if k in EditConfig.__dataclass_fields__}
    if strategy != "mi_inpaint":
        kw.pop("k", None)
        kw.pop("f_clamp", None)
    if strategy not in ("pni", "ddim_pni"):
        kw.pop("f_par", None)
    kw.pop("strategy", None)
    return EditConfig(strategy=strategy, **kw)


def _row_key(strategy: str, cfg: EditConfig) -> tuple:
    if strategy == "mi_inpaint":
        return cfg.k, cfg.f_clamp
    if strategy in ("pni", "ddim_pni"):
        return None, cfg.f_par
    return None, None


def run_grid(
    world: WorldSpec,
    schedule: Schedule,
    strategy,
    param_grid,
    n_clips: int = 200,
    master_seed: int = 0,
    frames: int = 64,
    mi_frames: int = 10_000,
    base: dict | None = None,
    workers: int = 1,
    keep_outputs: bool = False,
) -> GridResult:
    """Evaluate every config of ``param_grid`` on the same paired clips.

    ``strategy`` is one name for all cells, or ``None`` when each entry of
    ``param_grid`` carries its own ``"strategy"``. Failures are recorded per
    row and do not stop the grid.
    """
    base = dict(base or {})
    base.setdefault("steps", schedule.steps)
    d = MixtureDenoiser(world)
    evals = make_eval_set(world, n_clips, frames, master_seed)
    contexts = evals.contexts

    masks = {}
    report = None

    def mask_for(k):
        nonlocal report
        if report is None:
            X, inst, pitch = sample_frames(world, mi_frames, np.random.SeedSequence([master_seed, 1]))
            report = analyze(X, inst, pitch)
        if k not in masks:
            masks[k] = build_mask(report, k)
        return masks[k]

    cells = []
    for params in param_grid:
        params = dict(params)
        strat = canonical_strategy(params.pop("strategy", strategy))
        cells.append((strat, params))

    def run_cell(cell):
        strat, params = cell
        try:
            cfg = _cell_config(strat, params, base)
        except ValueError as exc:
            return GridRow(strat, params.get("k"), params.get("f_clamp", params.get("f_par")), None, str(exc))
        k, f = _row_key(strat, cfg)
        try:
            mask = mask_for(cfg.k) if strat == "mi_inpaint" else None
            res = run_edit(contexts, cfg, d, schedule, mask, target=evals.targets, seed=evals.edit_seeds)
            metrics = evaluate_edit(res.output, evals.clips, world, evals.targets, reference_seed=[master_seed, 2])
            row = GridRow(strat, k, f, metrics)
            if keep_outputs:
                row.outputs = res.output
            return row
        except Exception as exc:  # one bad cell must not sink the grid
            logger.exception("grid cell %s %s failed", strat, params)
            return GridRow(strat, k, f, None, f"{type(exc).__name__}: {exc}")

    if workers > 1:
        # masks are built lazily; build the shared MI report once up front
        for strat, params in cells:
            if strat == "mi_inpaint" and "k" in {**base, **params}:
                try:
                    mask_for({**base, **params}["k"])
                except ValueError:
                    pass  # reported by the cell itself
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    config = {
        "strategy": strategy,
        "param_grid": [dict(p) for p in param_grid],
        "n_clips": n_clips,
        "master_seed": master_seed,
        "frames": frames,
        "mi_frames": mi_frames,
        "base": base,
        "schedule": schedule.to_dict(),
    }
    return GridResult(rows, config)


def paired_bootstrap(a, b, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float]:
    """Mean of ``b - a`` over paired clips with a percentile bootstrap interval."""
    diff = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(diff), size=(n_boot, len(diff)))
    means = diff[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(diff.mean()), float(lo), float(hi)

"""Per-channel mutual information between latent values and labels.

Values are binned by rank into equal-frequency bins, so estimates are exactly
invariant to strictly monotone per-channel transforms.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, rankdata
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

logger = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    pass


def quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Equal-frequency bin index per value; ties share a bin."""
    n = len(values)
    ranks = rankdata(values, method="average")
    return np.minimum(((ranks - 1.0) * bins / n).astype(int), bins - 1)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _plugin_mi(binned: np.ndarray, labels: np.ndarray, bins: int, n_labels: int) -> tuple[float, float]:
    """Plug-in MI in nats and the binned-channel entropy."""
    joint = np.zeros((bins, n_labels))
    np.add.at(joint, (binned, labels), 1.0)
    n = joint.sum()
    px = joint.sum(axis=1, keepdims=True) / n
    py = joint.sum(axis=0, keepdims=True) / n
    pxy = joint / n
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return max(mi, 0.0), _entropy(joint.sum(axis=1))


def estimate_mi(frames, labels, bins: int = 16) -> np.ndarray:
    """Normalized MI in [0, 1] of every channel against ``labels``.

    Raw plug-in MI is divided by ``min(H(binned channel), H(labels))``.
    Constant channels score 0 with a warning.
    """
    frames = np.asarray(frames, dtype=float)
    labels = np.asarray(labels)
    if frames.ndim != 2 or len(frames) != len(labels):
        raise ValueError("frames must be (N, C) with one label per row")
    _, codes = np.unique(labels, return_inverse=True)
    n_labels = codes.max() + 1
    if n_labels < 2:
        raise DegenerateInputError("labels are single-class")
    if len(frames) < 10 * bins:
        raise DegenerateInputError(f"need at least {10 * bins} frames for {bins} bins, got {len(frames)}")
    h_labels = _entropy(np.bincount(codes))
    out = np.zeros(frames.shape[1])
    for c in range(frames.shape[1]):
        col = frames[:, c]
        if np.all(col == col[0]):
            warnings.warn(f"channel {c} is constant; MI set to 0", stacklevel=2)
            continue
        mi, h_x = _plugin_mi(quantile_bins(col, bins), codes, bins, n_labels)
        out[c] = min(mi / min(h_x, h_labels), 1.0)
    return out


def null_threshold(n: int, labels, bins: int = 16, channels: int = 1, alpha: float = 1e-3) -> float:
    """Normalized-MI level a label-independent channel stays under.

    Under independence ``2 N MI`` is chi-square with ``(bins-1)(L-1)`` degrees
    of freedom; ``alpha`` is family-wise over ``channels``.
    """
    _, codes = np.unique(np.asarray(labels), return_inverse=True)
    n_labels = codes.max() + 1
    df = (bins - 1) * (n_labels - 1)
    raw = chi2.ppf(1.0 - alpha / channels, df) / (2.0 * n)
    return float(raw / min(np.log(bins), _entropy(np.bincount(codes))))


def shuffled_mi(frames, labels, bins: int = 16, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return estimate_mi(frames, rng.permutation(np.asarray(labels)), bins)


@dataclass
class MiReport:
    instrument_mi: np.ndarray
    pitch_mi: np.ndarray | None
    ranking: np.ndarray
    cumulative: np.ndarray
    null_threshold: float = 0.0
    shuffled_max: float | None = None

    @classmethod
    def from_values(cls, instrument_mi, pitch_mi=None, **extra) -> "MiReport":
        instrument_mi = np.asarray(instrument_mi, dtype=float)
        # stable sort on the negated values: ties go to the lower channel index
        ranking = np.argsort(-instrument_mi, kind="stable")
        return cls(
            instrument_mi=instrument_mi,
            pitch_mi=None if pitch_mi is None else np.asarray(pitch_mi, dtype=float),
            ranking=ranking,
            cumulative=np.cumsum(instrument_mi[ranking]),
            **extra,
        )

    @property
    def channels(self) -> int:
        return len(self.instrument_mi)

    def to_dict(self) -> dict:
        return {
            "instrument_mi": self.instrument_mi.tolist(),
            "pitch_mi": None if self.pitch_mi is None else self.pitch_mi.tolist(),
            "ranking": self.ranking.tolist(),
            "cumulative": self.cumulative.tolist(),
            "null_threshold": self.null_threshold,
            "shuffled_max": self.shuffled_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiReport":
        return cls.from_values(
            d["instrument_mi"],
            d.get("pitch_mi"),
            null_threshold=d.get("null_threshold", 0.0),
            shuffled_max=d.get("shuffled_max"),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def save_csv(self, path) -> None:
        """One row per channel, in channel order, with its rank."""
        rank_of = np.empty(self.channels, dtype=int)
        rank_of[self.ranking] = np.arange(self.channels)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["channel", "instrument_mi", "pitch_mi", "rank"])
            for c in range(self.channels):
                pm = "" if self.pitch_mi is None else repr(float(self.pitch_mi[c]))
                wr.writerow([c, repr(float(self.instrument_mi[c])), pm, int(rank_of[c])])


@dataclass(frozen=True, eq=False)
class ChannelMask:
    """Complementary binary channel masks; ``timbre + struct == 1``."""

    timbre: np.ndarray
    struct: np.ndarray
    k: float

    def __post_init__(self):
        tim = np.asarray(self.timbre, dtype=float)
        if not np.array_equal(tim + np.asarray(self.struct, dtype=float), np.ones_like(tim)):
            raise ValueError("timbre and struct masks must be complementary")

    @property
    def n_timbre(self) -> int:
        return int(np.asarray(self.timbre).sum())

    @classmethod
    def from_timbre_channels(cls, channels: int, selected, k: float) -> "ChannelMask":
        tim = np.zeros(channels)
        tim[np.asarray(list(selected), dtype=int)] = 1.0
        return cls(tim, 1.0 - tim, k)


def n_selected(k: float, channels: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(k * channels + 0.5))


def build_mask(report: MiReport, k: float) -> ChannelMask:
    """Top ``round(k * C)`` channels by instrument MI become the timbre mask."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k!r}")
    top = report.ranking[: n_selected(k, report.channels)]
    return ChannelMask.from_timbre_channels(report.channels, top, k)


def cumulative_mi(report: MiReport, k: float) -> tuple[float, float]:
    """(MI mass in the top-k channels, residual mass in the rest)."""
    m = n_selected(k, report.channels)
    total = float(report.instrument_mi.sum())
    top = float(report.instrument_mi[report.ranking[:m]].sum())
    return top, total - top


def analyze(frames, instruments, pitches=None, bins: int = 16, shuffle_seed=None) -> MiReport:
    """MI of every channel against instrument (and pitch, if given)."""
    inst_mi = estimate_mi(frames, instruments, bins)
    pitch_mi = None if pitches is None else estimate_mi(frames, pitches, bins)
    thr = null_threshold(len(frames), instruments, bins, channels=np.shape(frames)[1])
    shuffled = None
    if shuffle_seed is not None:
        shuffled = float(shuffled_mi(frames, instruments, bins, shuffle_seed).max())
    return MiReport.from_values(inst_mi, pitch_mi, null_threshold=thr, shuffled_max=shuffled)


class MutualInfoChannelSelector(SelectorMixin, BaseEstimator):
    """Keep the top ``k`` fraction of channels ranked by MI with the labels.

    ``fit(X, y)`` takes frames (N, C) and instrument labels; pitch labels may be
    passed as ``pitch`` for the reported second MI profile. The support is the
    timbre mask; :attr:`mask_` holds the full :class:`ChannelMask`.
    """

    def __init__(self, k: float = 0.5, bins: int = 16):
        self.k = k
        self.bins = bins

    def fit(self, X, y, pitch=None):
        X, y = check_X_y(X, y)
        self.report_ = analyze(X, y, pitch, bins=self.bins)
        self.mask_ = build_mask(self.report_, self.k)
        self.n_features_in_ = X.shape[1]
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "mask_")
        return np.asarray(self.mask_.timbre, dtype=bool)

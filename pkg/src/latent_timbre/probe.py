"""Noise-level probe for choosing the partial-injection fraction.

A logistic classifier learns to tell clean frames from timbre-swapped ones
after both have been corrupted to a given noise level. The smallest fraction
at which held-out accuracy reaches chance is taken as ``f_par``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_is_fitted, check_X_y

from .mi import ChannelMask
from .schedule import Schedule, step_for_fraction

logger = logging.getLogger(__name__)


class NotAtChanceWarning(UserWarning):
    pass


def make_swapped(frames, labels, mask: ChannelMask, rng) -> np.ndarray:
    """Replace each frame's timbre channels with those of a random other-instrument frame."""
    frames = np.asarray(frames, dtype=float)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("make_swapped needs at least two instruments")
    rng = np.random.default_rng(rng)
    n = len(frames)
    donor = rng.integers(0, n, size=n)
    bad = labels[donor] == labels
    while bad.any():
        donor[bad] = rng.integers(0, n, size=int(bad.sum()))
        bad = labels[donor] == labels
    tim = np.asarray(mask.timbre, dtype=bool)
    out = frames.copy()
    out[:, tim] = frames[donor][:, tim]
    return out


def pairwise_features(z: np.ndarray) -> np.ndarray:
    """Channels followed by every product ``z_i * z_j`` with ``i <= j``."""
    iu, ju = np.triu_indices(z.shape[1])
    return np.hstack([z, z[:, iu] * z[:, ju]])


class LogisticProbe(ClassifierMixin, BaseEstimator):
    """L2-regularized logistic regression fitted with L-BFGS.

    Features are standardized on the training set. With ``pairwise=True`` the
    raw inputs are first expanded by :func:`pairwise_features`.
    """

    def __init__(self, l2: float = 1e-2, pairwise: bool = True, max_iter: int = 300, tol: float = 1e-6):
        self.l2 = l2
        self.pairwise = pairwise
        self.max_iter = max_iter
        self.tol = tol

    def _expand(self, X):
        X = np.asarray(X, dtype=float)
        return pairwise_features(X) if self.pairwise else X

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, yy = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError("LogisticProbe is a binary classifier")
        self.n_features_in_ = X.shape[1]
        F = self._expand(X)
        self.mean_ = F.mean(axis=0)
        scale = F.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        F = (F - self.mean_) / self.scale_
        sign = 2.0 * yy - 1.0
        n = len(F)

        def loss_grad(w):
            margin = sign * (F @ w[:-1] + w[-1])
            loss = -log_expit(margin).sum() / n + 0.5 * self.l2 * w[:-1] @ w[:-1]
            r = -sign * expit(-margin) / n
            grad = np.empty_like(w)
            grad[:-1] = F.T @ r + self.l2 * w[:-1]
            grad[-1] = r.sum()
            return loss, grad

        res = minimize(
            loss_grad,
            np.zeros(F.shape[1] + 1),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": self.max_iter, "gtol": self.tol, "ftol": 1e-3 * self.tol},
        )
        if not np.all(np.isfinite(res.x)):
            raise FloatingPointError(f"probe weights diverged (loss {res.fun!r})")
        if not res.success:
            warnings.warn(f"probe did not converge: {res.message} (final loss {res.fun:.6g})", ConvergenceWarning)
        self.coef_ = res.x[:-1]
        self.intercept_ = float(res.x[-1])
        self.loss_ = float(res.fun)
        self.n_iter_ = int(res.nit)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        F = (self._expand(X) - self.mean_) / self.scale_
        return F @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


@dataclass
class ProbeCurve:
    fractions: list
    accuracy: list
    n_heldout: int
    losses: list

    def as_dict(self) -> dict:
        return dict(zip(self.fractions, self.accuracy))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["f", "accuracy", "n_heldout"])
            for f, a in zip(self.fractions, self.accuracy):
                wr.writerow([repr(float(f)), repr(float(a)), self.n_heldout])


def train_probe(clean, swapped, s: Schedule, f_grid, rng=0, heldout: float = 0.2, probe_params=None) -> ProbeCurve:
    """Held-out clean-vs-swapped accuracy after corruption to each fraction in ``f_grid``."""
    clean = np.asarray(clean, dtype=float)
    swapped = np.asarray(swapped, dtype=float)
    if clean.shape != swapped.shape:
        raise ValueError("clean and swapped populations must have the same shape (balanced classes)")
    f_grid = [float(f) for f in f_grid]
    if not f_grid:
        raise ValueError("empty fraction grid")
    seq = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
    split_seq, *f_seqs = seq.spawn(len(f_grid) + 1)

    X = np.vstack([clean, swapped])
    y = np.r_[np.zeros(len(clean), int), np.ones(len(swapped), int)]
    order = np.random.default_rng(split_seq).permutation(len(X))
    n_test = int(round(heldout * len(X)))
    test, train = order[:n_test], order[n_test:]

    accs, losses = [], []
    for f, fs in zip(f_grid, f_seqs):
        sigma = s.sigma(step_for_fraction(s, f))
        noisy = X + sigma * np.random.default_rng(fs).standard_normal(X.shape)
        feats = np.hstack([noisy, np.full((len(X), 1), np.log(sigma))])
        probe = LogisticProbe(**(probe_params or {})).fit(feats[train], y[train])
        accs.append(float(probe.score(feats[test], y[test])))
        losses.append(probe.loss_)
        logger.debug("f=%.3f sigma=%.3f acc=%.4f", f, sigma, accs[-1])
    return ProbeCurve(f_grid, accs, n_test, losses)


def select_f_par(curve, delta: float = 0.03) -> float:
    """Smallest fraction whose accuracy lies within ``delta`` of 0.5."""
    items = sorted((curve.as_dict() if isinstance(curve, ProbeCurve) else dict(curve)).items())
    if not items:
        raise ValueError("empty accuracy curve")
    for f, acc in items:
        if abs(acc - 0.5) <= delta:
            return f
    warnings.warn(f"accuracy never reached 0.5 +/- {delta}; using largest f", NotAtChanceWarning)
    return items[-1][0]

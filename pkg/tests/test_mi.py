import json
import warnings

import numpy as np
import pytest
from scipy.stats import entropy
from sklearn.metrics import mutual_info_score

from latent_timbre.mi import (
    ChannelMask,
    DegenerateInputError,
    MiReport,
    MutualInfoChannelSelector,
    analyze,
    build_mask,
    cumulative_mi,
    estimate_mi,
    n_selected,
    null_threshold,
    shuffled_mi,
)
from latent_timbre.world import sample_frames


@pytest.fixture(scope="module")
def frames0(world0):
    return sample_frames(world0, 10_000, 1)


def _oracle_mi(col, labels, bins):
    # rank binning without ties, then sklearn's plug-in MI
    ranks = np.empty(len(col), dtype=int)
    ranks[np.argsort(col, kind="stable")] = np.arange(len(col))
    binned = ranks * bins // len(col)
    raw = mutual_info_score(binned, labels)
    return raw / min(entropy(np.bincount(binned)), entropy(np.bincount(labels)))


def test_matches_independent_estimator():
    rng = np.random.default_rng(4)
    labels = rng.integers(5, size=3000)
    X = rng.normal(size=(3000, 4)) + 0.7 * labels[:, None] * np.array([0, 0.3, 1, 3])
    got = estimate_mi(X, labels, bins=16)
    want = [_oracle_mi(X[:, c], labels, 16) for c in range(4)]
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_independent_channel_is_small():
    rng = np.random.default_rng(0)
    assert np.all(estimate_mi(rng.normal(size=(50_000, 3)), rng.integers(8, size=50_000)) < 0.02)


def test_deterministic_channel_is_one():
    labels = np.repeat(np.arange(4), 250)
    assert estimate_mi(labels[:, None].astype(float), labels, bins=16)[0] == pytest.approx(1.0)


def test_constant_channel_warns_zero():
    rng = np.random.default_rng(1)
    X = np.column_stack([np.full(400, 2.0), rng.normal(size=400)])
    with pytest.warns(UserWarning, match="constant"):
        mi = estimate_mi(X, rng.integers(3, size=400))
    assert mi[0] == 0.0


def test_degenerate_inputs():
    rng = np.random.default_rng(1)
    with pytest.raises(DegenerateInputError):
        estimate_mi(rng.normal(size=(400, 2)), np.zeros(400, dtype=int))
    with pytest.raises(DegenerateInputError):
        estimate_mi(rng.normal(size=(100, 2)), rng.integers(2, size=100), bins=16)
    with pytest.raises(ValueError):
        estimate_mi(rng.normal(size=(400, 2)), rng.integers(2, size=300))


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    labels = rng.integers(4, size=2000)
    X = rng.normal(size=(2000, 3)) + labels[:, None]
    up = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3, 7.0 * X[:, 2] + 1])
    assert np.array_equal(estimate_mi(X, labels), estimate_mi(up, labels))
    # a decreasing map reverses the bin order, which only reorders the sum
    down = -np.exp(X)
    assert np.allclose(estimate_mi(X, labels), estimate_mi(down, labels), rtol=0, atol=1e-15)


def test_report_invariants(frames0):
    z, inst, pitch = frames0
    r = analyze(z, inst, pitch)
    assert np.all((r.instrument_mi >= 0) & (r.instrument_mi <= 1))
    assert sorted(r.ranking.tolist()) == list(range(64))
    assert np.all(np.diff(r.cumulative) >= 0)


def test_timbre_channels_beat_structure_channels(world0, frames0):
    z, inst, _ = frames0
    mi = estimate_mi(z, inst)
    assert mi[list(world0.timbre_channels)].min() > mi[list(world0.structure_channels)].max()


def test_shuffled_labels_fall_under_null(frames0):
    z, inst, _ = frames0
    thr = null_threshold(len(z), inst, 16, channels=64)
    for seed in range(3):
        assert shuffled_mi(z, inst, seed=seed).max() < thr


def test_mask_sizes():
    r = MiReport.from_values(np.linspace(1, 0, 64))
    assert build_mask(r, 0.5).n_timbre == 32
    assert np.flatnonzero(build_mask(r, 1 / 64).timbre).tolist() == [0]
    assert n_selected(0.45, 64) == 29 and n_selected(0.55, 64) == 35
    # exact half rounds up
    assert n_selected(0.5, 5) == 3
    with pytest.raises(ValueError):
        build_mask(r, 1.5)


def test_mask_ties_go_to_lower_index():
    r = MiReport.from_values([0.2, 0.5, 0.5, 0.5, 0.1])
    assert np.flatnonzero(build_mask(r, 0.4).timbre).tolist() == [1, 2]


def test_mask_complementary_and_deterministic():
    r = MiReport.from_values(np.random.default_rng(0).random(64))
    a, b = build_mask(r, 0.3), build_mask(r, 0.3)
    assert np.array_equal(a.timbre + a.struct, np.ones(64))
    assert np.array_equal(a.timbre, b.timbre)
    with pytest.raises(ValueError):
        ChannelMask(np.ones(3), np.ones(3), 0.5)


def test_recall_of_planted_channels(world0, frames0):
    z, inst, _ = frames0
    mask = build_mask(analyze(z, inst), 16 / 64)
    picked = set(np.flatnonzero(mask.timbre))
    assert len(picked & set(world0.timbre_channels)) / 16 >= 0.9


def test_cumulative_examples(world):
    r = MiReport.from_values(np.full(10, 0.3))
    top, rest = cumulative_mi(r, 0.5)
    assert top == pytest.approx(rest)
    top, rest = cumulative_mi(r, 1.0)
    assert top == pytest.approx(3.0) and rest == pytest.approx(0.0, abs=1e-12)
    z, inst, _ = sample_frames(world, 10_000, 1)
    top, rest = cumulative_mi(analyze(z, inst), 0.5)
    assert top / (top + rest) >= 0.8


def test_report_serialization(tmp_path, frames0):
    z, inst, pitch = frames0
    r = analyze(z[:2000], inst[:2000], pitch[:2000], shuffle_seed=0)
    r.save_json(tmp_path / "r.json")
    back = MiReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert np.array_equal(back.ranking, r.ranking) and back.null_threshold == r.null_threshold
    r.save_csv(tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "channel,instrument_mi,pitch_mi,rank" and len(rows) == 65


def test_selector_estimator(frames0):
    from sklearn.base import clone

    z, inst, _ = frames0
    sel = MutualInfoChannelSelector(k=0.5).fit(z, inst)
    assert sel.transform(z).shape == (len(z), 32)
    assert clone(sel).get_params() == {"k": 0.5, "bins": 16}
    assert np.array_equal(sel.get_support(), sel.mask_.timbre.astype(bool))

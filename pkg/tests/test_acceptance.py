"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line with the measured numbers; the lines are
repeated in a summary section at the end of the pytest run.
"""

import time

import numpy as np
import pytest

from latent_timbre.bench import (
    INPAINT_SETTINGS,
    dpd_analog,
    frechet_gaussian,
    onset_f1,
    paired_bootstrap,
    run_grid,
    comparison_grid,
)
from latent_timbre.cli import main as cli_main
from latent_timbre.edits import EditConfig, edit_mi_inpaint
from latent_timbre.mi import ChannelMask, analyze, build_mask, n_selected, shuffled_mi
from latent_timbre.probe import make_swapped, select_f_par, train_probe
from latent_timbre.sampler import ddim_invert, ddim_sample, edm_sample
from latent_timbre.schedule import CLEAN, build_schedule, step_for_fraction, to_ddim
from latent_timbre.world import MixtureDenoiser, make_world, sample_clip, sample_frames

F_GRID = [round(0.1 * i, 1) for i in range(1, 11)]


def test_criterion_1_schedule_exactness(acceptance_line):
    t0 = time.perf_counter()
    s = build_schedule(30)
    c = to_ddim(s)
    sig2 = s.as_array() ** 2
    worst = float(np.max(np.abs(np.asarray(c.alphas) * (1 + sig2) - 1)))
    roundtrip = all(step_for_fraction(s, s.sigma(t) / s.sigma_max) == t for t in range(s.steps + 1))
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and roundtrip and seconds < 1.0
    acceptance_line(1, ok, f"max|alpha(1+sigma^2)-1|={worst:.1e} lookup_roundtrip={roundtrip} {seconds:.3f}s")
    assert ok


def test_criterion_2_inversion_fidelity(acceptance_line):
    w = make_world()
    d = MixtureDenoiser(w)
    clips = np.stack([sample_clip(w, 64, i).data for i in range(20)])
    errors = []
    for n in (25, 50, 100, 200):
        c = to_ddim(build_schedule(n))
        back = ddim_sample(d, c, ddim_invert(d, c, clips, n).final, n).final
        errors.append(float(np.linalg.norm(back - clips) / np.linalg.norm(clips)))
    monotone = all(b < a for a, b in zip(errors, errors[1:]))

    s = build_schedule(30)
    many = np.stack([sample_clip(w, 16, 10_000 + i).data for i in range(1000)])
    z_T = ddim_invert(d, to_ddim(s), many, s.steps).final
    var_ratio = float(z_T.var() / s.sigma_max**2)

    ok = errors[-1] < 1e-2 and monotone and abs(var_ratio - 1) <= 0.10
    acceptance_line(
        2,
        ok,
        "roundtrip rel err " + " ".join(f"{n}:{e:.4f}" for n, e in zip((25, 50, 100, 200), errors))
        + f" (<1e-2 at 200: {errors[-1] < 1e-2}) "
        f"monotone={monotone} Var[z_T]/sigma_T^2={var_ratio:.4f}",
    )
    assert ok


def test_criterion_3_mi_recovery(acceptance_line):
    w = make_world(entanglement=0.0)
    z, inst, _ = sample_frames(w, 10_000, 1)
    report = analyze(z, inst)
    planted = set(w.timbre_channels)
    top = set(np.flatnonzero(build_mask(report, len(planted) / w.channels).timbre))
    recall = len(top & planted) / len(planted)
    shuffled = shuffled_mi(z, inst, seed=2)
    below = bool(np.all(shuffled < report.null_threshold))
    selected = build_mask(report, 0.5).n_timbre
    ok = recall >= 0.9 and below and selected == 32 and n_selected(0.5, 64) == 32
    acceptance_line(
        3,
        ok,
        f"recall@{len(planted)}={recall:.3f} shuffled max={shuffled.max():.2e} < null {report.null_threshold:.2e}: "
        f"{below} k=0.5 selects {selected}",
    )
    assert ok


def test_criterion_4_probe(acceptance_line):
    t0 = time.perf_counter()
    w = make_world()
    s = build_schedule(30)
    z, inst, _ = sample_frames(w, 10_000, np.random.SeedSequence([0, 1]))
    mask = build_mask(analyze(z, inst), 0.5)
    n = 5000
    X, labels, _ = sample_frames(w, 2 * n, np.random.SeedSequence([0, 3]))
    swapped = make_swapped(X[n:], labels[n:], mask, np.random.SeedSequence([0, 4]))
    curve = train_probe(X[:n], swapped, s, F_GRID, np.random.SeedSequence([0, 5]))
    f_star = select_f_par(curve)
    seconds = time.perf_counter() - t0
    acc = curve.accuracy
    non_increasing = all(b <= a + 0.05 for a, b in zip(acc, acc[1:]))
    at_one = acc[-1]
    ok = non_increasing and 0.45 <= at_one <= 0.55 and 0.3 <= f_star <= 0.7 and seconds < 60
    acceptance_line(
        4,
        ok,
        f"curve={[round(a, 3) for a in acc]} non_increasing={non_increasing} acc(f=1)={at_one:.3f} "
        f"f*={f_star} {seconds:.1f}s",
    )
    assert ok


def test_criterion_5_clamping(acceptance_line):
    w = make_world()
    d = MixtureDenoiser(w)
    s = build_schedule(30)
    z, inst, _ = sample_frames(w, 10_000, 1)
    report = analyze(z, inst)
    ctx = np.stack([sample_clip(w, 32, 50 + i).data for i in range(8)])
    targets = np.arange(8)[::-1]

    clamp_exact = True
    for k, f in INPAINT_SETTINGS:
        mask = build_mask(report, k)
        res = edit_mi_inpaint(
            ctx, EditConfig("mi_inpaint", k=k, f_clamp=f), d, s, mask, target=targets, seed=3, keep_trajectory=True
        )
        st = mask.struct.astype(bool)
        t_c = res.info["t_c"]
        for t, _, state in res.trajectory.states:
            if t >= t_c - 1:
                clamp_exact &= bool(np.array_equal(state[:, st], res.context_trajectory.at(t)[:, st]))

    full = ChannelMask.from_timbre_channels(w.channels, range(w.channels), 1.0)
    out = edit_mi_inpaint(ctx, EditConfig("mi_inpaint", k=1.0, f_clamp=0.0), d, s, full, target=targets, seed=9).output
    # batch edits draw each item's noise from its own generator
    eps = np.stack([np.random.default_rng(9).standard_normal(ctx.shape[1:]) for _ in ctx])
    plain = edm_sample(d, s, s.sigma_max * eps, s.steps, CLEAN, targets, 1.25).final
    k1_exact = bool(np.array_equal(out, plain))

    empty = ChannelMask.from_timbre_channels(w.channels, [], 0.0)
    cfg0 = EditConfig("mi_inpaint", k=0.0, f_clamp=0.0, cfg_weight=0.0)
    out0 = edit_mi_inpaint(ctx, cfg0, d, s, empty, target=targets).output
    c = to_ddim(s)
    recon = ddim_sample(d, c, ddim_invert(d, c, ctx, s.steps).final, s.steps).final
    k0_err = float(np.max(np.abs(out0 - recon)))

    ok = clamp_exact and k1_exact and k0_err <= 1e-9
    acceptance_line(
        5, ok, f"clamped steps bit-equal={clamp_exact} k=1 plain sampling bit-equal={k1_exact} k=0 vs DDIM recon {k0_err:.1e}"
    )
    assert ok


def _ci_positive(a, b):
    """95% paired-bootstrap interval of mean(b - a) lies above zero."""
    mean, lo, hi = paired_bootstrap(a, b)
    return lo > 0, (mean, lo, hi)


def _ci_not_negative(a, b):
    """mean(b - a) is not significantly below zero."""
    mean, lo, hi = paired_bootstrap(a, b)
    return hi >= 0, (mean, lo, hi)


def test_criterion_6_method_orderings(acceptance_line):
    t0 = time.perf_counter()
    g = run_grid(make_world(), build_schedule(30), None, comparison_grid(0.5), n_clips=200, master_seed=0)
    assert not [r.error for r in g.rows if r.error]
    pc = lambda row, m: row.metrics.per_clip[m]
    pni, dpni, inv = g.row("pni", None, 0.5), g.row("ddim_pni", None, 0.5), g.row("ddim_inversion")

    checks = {}
    checks["a: DPD ddim_pni < pni"] = _ci_positive(pc(dpni, "dpd_analog"), pc(pni, "dpd_analog"))
    checks["a: F1 ddim_pni > pni"] = _ci_positive(pc(pni, "onset_f1"), pc(dpni, "onset_f1"))
    checks["b: sim inversion >= ddim_pni"] = _ci_not_negative(pc(dpni, "class_sim"), pc(inv, "class_sim"))
    checks["b: DPD inversion > pni"] = _ci_positive(pc(pni, "dpd_analog"), pc(inv, "dpd_analog"))
    checks["b: DPD inversion > ddim_pni"] = _ci_positive(pc(dpni, "dpd_analog"), pc(inv, "dpd_analog"))
    rows = [g.row("mi_inpaint", k, f) for k, f in INPAINT_SETTINGS]
    for i, (a, b) in enumerate(zip(rows, rows[1:]), start=1):
        checks[f"c: DPD setting {i}>{i + 1}"] = _ci_positive(pc(b, "dpd_analog"), pc(a, "dpd_analog"))
        checks[f"c: F1 setting {i}<{i + 1}"] = _ci_positive(pc(a, "onset_f1"), pc(b, "onset_f1"))
        checks[f"c: sim setting {i}>={i + 1}"] = _ci_not_negative(pc(b, "class_sim"), pc(a, "class_sim"))
    seconds = time.perf_counter() - t0

    failed = [name for name, (good, _) in checks.items() if not good]
    for name, (good, (mean, lo, hi)) in checks.items():
        print(f"  {name}: {'ok' if good else 'FAILED'} diff={mean:.4f} 95% CI [{lo:.4f}, {hi:.4f}]")
    print(g.to_csv())
    ok = not failed and seconds < 600
    dpd = [round(r.metrics.dpd_analog, 3) for r in rows]
    f1 = [round(r.metrics.onset_f1, 3) for r in rows]
    acceptance_line(
        6,
        ok,
        f"{len(checks) - len(failed)}/{len(checks)} orderings hold at 95% "
        f"(baselines DPD pni={pni.metrics.dpd_analog:.3f} ddim_pni={dpni.metrics.dpd_analog:.3f} "
        f"inv={inv.metrics.dpd_analog:.3f}; settings DPD {dpd} F1 {f1}) {seconds:.0f}s"
        + (f" failed: {failed}" if failed else ""),
    )
    assert ok


def test_criterion_7_metric_units(acceptance_line):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 6))
    x -= x.mean(0)
    x = x @ np.linalg.inv(np.linalg.cholesky(np.cov(x, rowvar=False))).T
    m = rng.standard_normal(6)
    frechet_err = abs(frechet_gaussian(x, x + m) ** 2 - m @ m)

    track = np.array([0, 0, 3, 3, 3, 5, 5, 1, 1, 1])
    shifted = np.r_[track[0], track[:-1]]
    f1_table = [
        onset_f1(track, track) == 1.0,
        onset_f1(np.zeros(10, int), track) == 0.0,
        onset_f1(shifted, track, tol=1) == 1.0,
    ]
    dpd_table = [dpd_analog(track, track) == 0.0, dpd_analog(track + 1, track) == 1.0]
    ok = frechet_err <= 1e-9 and all(f1_table) and all(dpd_table)
    acceptance_line(7, ok, f"|d^2-|m|^2|={frechet_err:.1e} onset_f1 table={f1_table} dpd table={dpd_table}")
    assert ok


def test_criterion_8_grid_determinism(tmp_path, acceptance_line):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli_main(["--seed", "7", "--out-dir", str(out), "grid", "--n-clips", "20"]) == 0
    same = (a / "grid.csv").read_bytes() == (b / "grid.csv").read_bytes()
    acceptance_line(8, same, f"two `grid` runs byte-identical={same} ({len((a / 'grid.csv').read_bytes())} bytes)")
    assert same

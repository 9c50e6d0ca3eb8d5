"""Command-line entry point: ``latent-timbre <subcommand>``.

Every subcommand reads optional settings from ``--config`` (a JSON object
with ``world``, ``schedule``, ``mi``, ``probe``, ``edit`` and ``grid``
sections); explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import INPAINT_SETTINGS, evaluate_edit, run_grid, comparison_grid
from .edits import EditConfig, run_edit
from .mi import MiReport, analyze, build_mask
from .probe import make_swapped, select_f_par, train_probe
from .schedule import build_schedule
from .world import (
    LatentClip,
    MixtureDenoiser,
    load_dataset,
    load_world,
    make_world,
    records_from_frames,
    sample_clip,
    sample_frames,
    save_dataset,
    save_world,
)

logger = logging.getLogger("latent_timbre")


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _world(args, cfg):
    if getattr(args, "world", None):
        return load_world(args.world)
    kw = dict(cfg.get("world", {}))
    if args.seed is not None:
        kw["seed"] = args.seed
    return make_world(**kw)


def _schedule(cfg, steps=None):
    kw = dict(cfg.get("schedule", {}))
    if steps is not None:
        kw["steps"] = steps
    return build_schedule(**kw)


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))
    logger.info("wrote %s", path)


def _mi_frames(args, cfg, w):
    if getattr(args, "dataset", None):
        recs = load_dataset(args.dataset)
        return np.array([r.z for r in recs]), np.array([r.inst for r in recs]), np.array([r.pitch for r in recs])
    n = args.n_frames or cfg.get("mi", {}).get("n_frames", 10_000)
    return sample_frames(w, n, np.random.SeedSequence([_seed(args), 1]))


def cmd_gen_world(args, cfg) -> None:
    w = _world(args, cfg)
    save_world(w, args.out_dir / "world.json")
    if args.n_frames:
        X, inst, pitch = sample_frames(w, args.n_frames, _seed(args))
        save_dataset(args.out_dir / "dataset.jsonl", records_from_frames(X, inst, pitch))
    for j in range(args.clips):
        clip = sample_clip(w, args.frames, [_seed(args), j])
        _write_json(args.out_dir / f"clip_{j:03d}.json", clip.to_dict())


def cmd_analyze_mi(args, cfg) -> None:
    w = _world(args, cfg)
    X, inst, pitch = _mi_frames(args, cfg, w)
    bins = cfg.get("mi", {}).get("bins", 16)
    report = analyze(X, inst, pitch, bins=bins, shuffle_seed=_seed(args))
    report.save_json(args.out_dir / "mi_report.json")
    report.save_csv(args.out_dir / "mi_channels.csv")
    k = args.k if args.k is not None else cfg.get("mi", {}).get("k", 0.5)
    mask = build_mask(report, k)
    _write_json(args.out_dir / "mask.json", {"k": k, "timbre": np.flatnonzero(mask.timbre).tolist()})


def cmd_probe(args, cfg) -> None:
    pcfg = cfg.get("probe", {})
    w = _world(args, cfg)
    s = _schedule(cfg)
    seed = _seed(args)
    if args.mi_report:
        report = MiReport.from_dict(json.loads(Path(args.mi_report).read_text()))
    else:
        report = analyze(*_mi_frames(args, cfg, w)[:2])
    k = args.k if args.k is not None else pcfg.get("k", 0.5)
    mask = build_mask(report, k)
    n = pcfg.get("n_per_class", 5000)
    X, inst, _ = sample_frames(w, 2 * n, np.random.SeedSequence([seed, 3]))
    swapped = make_swapped(X[n:], inst[n:], mask, np.random.SeedSequence([seed, 4]))
    f_grid = args.f_grid or pcfg.get("f_grid", [round(0.1 * i, 1) for i in range(1, 11)])
    curve = train_probe(X[:n], swapped, s, f_grid, np.random.SeedSequence([seed, 5]))
    curve.to_csv(args.out_dir / "probe_curve.csv")
    f_star = select_f_par(curve, pcfg.get("delta", 0.03))
    run_cfg = dict(cfg)
    run_cfg["edit"] = {**cfg.get("edit", {}), "f_par": f_star}
    _write_json(args.out_dir / "run_config.json", run_cfg)
    print(f"f_par* = {f_star}")


def _edit_config(args, cfg, target) -> EditConfig:
    e = dict(cfg.get("edit", {}))
    for name in ("strategy", "k", "f_clamp", "f_par"):
        v = getattr(args, name)
        if v is not None:
            e[name] = v
    if "strategy" not in e:
        raise ValueError("no --strategy given")
    strategy = e.pop("strategy")
    e["seed"] = _seed(args, e.get("seed", 0))
    e.setdefault("steps", cfg.get("schedule", {}).get("steps", 30))
    fields = EditConfig.__dataclass_fields__
    if strategy.replace("-", "_") != "mi_inpaint":
        e.pop("k", None)
        e.pop("f_clamp", None)
    return EditConfig(strategy=strategy, target_instrument=target, **{k: v for k, v in e.items() if k in fields})


def cmd_edit(args, cfg) -> None:
    w = _world(args, cfg)
    clip = LatentClip.from_dict(json.loads(Path(args.input).read_text()))
    target = args.target if args.target is not None else cfg.get("edit", {}).get("target")
    if target is None:
        raise ValueError("no --target instrument given")
    ec = _edit_config(args, cfg, int(target))
    s = _schedule(cfg, ec.steps)
    mask = None
    if ec.strategy == "mi_inpaint":
        X, inst, _ = _mi_frames(args, cfg, w)
        mask = build_mask(analyze(X, inst), ec.k)
    res = run_edit(clip.data, ec, MixtureDenoiser(w), s, mask, keep_trajectory=args.dump_trajectory is not None)
    out = {
        "config": ec.to_dict(),
        "output": res.output.tolist(),
        "context": clip.to_dict(),
        "seconds": res.seconds,
        "info": res.info,
    }
    out_path = Path(args.out) if args.out else args.out_dir / "result.json"
    _write_json(out_path, out)
    if args.dump_trajectory:
        res.trajectory.dump_jsonl(args.dump_trajectory)


def cmd_grid(args, cfg) -> None:
    g = cfg.get("grid", {})
    w = _world(args, cfg)
    s = _schedule(cfg)
    settings = [tuple(x) for x in g.get("settings", INPAINT_SETTINGS)]
    param_grid = g.get("param_grid") or comparison_grid(g.get("f_par", cfg.get("edit", {}).get("f_par", 0.5)), settings)
    result = run_grid(
        w,
        s,
        None,
        param_grid,
        n_clips=args.n_clips or g.get("n_clips", 200),
        master_seed=_seed(args),
        frames=g.get("frames", 64),
        mi_frames=g.get("mi_frames", 10_000),
        base=g.get("base"),
        workers=g.get("workers", 1),
    )
    (args.out_dir / "grid.csv").write_text(result.to_csv())
    (args.out_dir / "grid.json").write_text(result.to_json())
    failed = [r for r in result.rows if r.error]
    for r in failed:
        logger.error("cell %s failed: %s", r.key, r.error)
    sys.stdout.write(result.to_csv())
    if failed:
        raise RuntimeError(f"{len(failed)} grid cell(s) failed")


def cmd_eval(args, cfg) -> None:
    w = _world(args, cfg)
    outputs, sources, targets = [], [], []
    for p in args.inputs:
        r = json.loads(Path(p).read_text())
        outputs.append(np.asarray(r["output"], dtype=float))
        sources.append(LatentClip.from_dict(r["context"]))
        targets.append(int(r["config"]["target_instrument"]))
    report = evaluate_edit(outputs, sources, w, targets, reference_seed=_seed(args))
    _write_json(args.out_dir / "metrics.json", report.to_dict(with_per_clip=True))
    print(json.dumps(report.to_dict(), sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-timbre", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def world_arg(p):
        p.add_argument("--world", help="world.json (default: build from config)")

    p = sub.add_parser("gen-world", help="build a world; optionally sample frames and clips")
    p.add_argument("--n-frames", type=int, default=0, help="write this many frames to dataset.jsonl")
    p.add_argument("--clips", type=int, default=0, help="number of clip_NNN.json files to write")
    p.add_argument("--frames", type=int, default=64, help="frames per clip")
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("analyze-mi", help="per-channel MI report and timbre mask")
    world_arg(p)
    p.add_argument("--dataset", help="dataset.jsonl (default: sample from the world)")
    p.add_argument("--n-frames", type=int)
    p.add_argument("--k", type=float)
    p.set_defaults(func=cmd_analyze_mi)

    p = sub.add_parser("probe", help="noise-level probe; writes the curve and the selected f_par")
    world_arg(p)
    p.add_argument("--dataset")
    p.add_argument("--n-frames", type=int)
    p.add_argument("--mi-report", help="reuse an existing mi_report.json")
    p.add_argument("--k", type=float)
    p.add_argument("--f-grid", type=float, nargs="+")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("edit", help="edit one clip")
    world_arg(p)
    p.add_argument("--strategy")
    p.add_argument("--k", type=float)
    p.add_argument("--f-clamp", type=float)
    p.add_argument("--f-par", type=float)
    p.add_argument("--target", type=int)
    p.add_argument("--in", dest="input", required=True, help="clip.json")
    p.add_argument("--out", help="result.json (default: <out-dir>/result.json)")
    p.add_argument("--dataset")
    p.add_argument("--n-frames", type=int)
    p.add_argument("--dump-trajectory", help="write the sampling trajectory as JSONL")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("grid", help="baselines and (k, f_clamp) grid on paired clips")
    world_arg(p)
    p.add_argument("--n-clips", type=int)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("eval", help="score result.json files from `edit`")
    world_arg(p)
    p.add_argument("inputs", nargs="+")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg)
    except Exception as exc:
        logger.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

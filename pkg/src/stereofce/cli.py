"""Command-line entry point.

One subcommand per task — synthesize data, train, infer, evaluate,
benchmark, gradient-check, ablate — each writing a self-contained run
directory: the effective config echoed back, logs, predictions in KITTI
label format (score as the 16th field), TSV reports and SVG plots.
Exit code 0 on success; any expected failure prints a one-line
diagnostic on stderr and returns nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, echo_config, load_run_config
from .dataio import (KittiLabel, parse_label_file, read_split,
                     serialize_labels, write_split)
from .dataio.synthetic import (LoadedScene, load_scene, render_synthetic,
                               save_scene)
from .errors import ConfigError, InputError, StereoFceError
from .evaluation import (EvalResult, GroundTruth, ScoredBox, bench,
                         evaluate_detections, pr_points, write_report)
from .fce import ConsistencyFn, KIND_FAMILY, build_fce_fast
from .geometry import box_params, corner_transform, iou3d, project_points
from .grid import build_grid, perturb
from .head import StereoDetector
from .training import TrainSample, train

__all__ = ["main"]


# ---------------------------------------------------------------------------
# shared plumbing


def _thread_count(requested: int) -> int:
    """--threads wins; else STEREOFCE_THREADS; else logical cores."""
    if requested and requested > 0:
        return int(requested)
    env = os.environ.get("STEREOFCE_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(
                f"STEREOFCE_THREADS must be an integer, got {env!r}") from exc
    return max(1, os.cpu_count() or 1)


def _config_from(args) -> RunConfig:
    cfg = (load_run_config(args.config)
           if getattr(args, "config", None) else RunConfig())
    updates = {}
    # (ablate reuses --iterations as a comma list; ignore it here)
    if isinstance(getattr(args, "iterations", None), int):
        updates["iterations"] = int(args.iterations)
    if getattr(args, "seed", None) is not None:
        updates["seed"] = int(args.seed)
    if getattr(args, "threads", None):
        updates["threads"] = int(args.threads)
    if getattr(args, "data", None):
        updates["data_dir"] = args.data
    if getattr(args, "out", None):
        updates["out_dir"] = args.out
    if getattr(args, "checkpoint", None):
        updates["checkpoint"] = args.checkpoint
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _model_from(cfg: RunConfig) -> StereoDetector:
    return StereoDetector(feat_cfg=cfg.features, head_cfg=cfg.head,
                          fn=cfg.fn, resl=cfg.resl, margin=cfg.margin)


def _load_weights(model: StereoDetector, path: str) -> None:
    if not path:
        raise ConfigError("a checkpoint is required (--checkpoint or config)")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    load_checkpoint(path, model.params)


def _scene_ids(data_dir: Path, split: str) -> list[str]:
    split_file = data_dir / f"{split}.txt"
    if split != "all" and split_file.exists():
        return read_split(split_file)
    label_dir = data_dir / "label_2"
    if not label_dir.is_dir():
        raise InputError(f"no label_2 directory under {data_dir}")
    return sorted(p.stem for p in label_dir.glob("*.txt"))


def _load_scenes(data_dir: str, split: str) -> list[LoadedScene]:
    root = Path(data_dir)
    if not root.is_dir():
        raise InputError(f"data directory not found: {data_dir}")
    ids = _scene_ids(root, split)
    if not ids:
        raise InputError(f"no scenes in {data_dir} (split {split!r})")
    return [load_scene(root, sid) for sid in ids]


def _bbox_of(box, rig, width: int | None = None,
             height: int | None = None) -> tuple[float, float, float, float]:
    """Axis-aligned image box of the projected 3D corners (left eye)."""
    corners = corner_transform(box)[:, :8].T
    uv, _, valid = project_points(corners, rig.left)
    if not np.any(valid):
        return (0.0, 0.0, 0.0, 0.0)
    uv = uv[valid]
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    if width is not None:
        lo[0], hi[0] = np.clip([lo[0], hi[0]], 0, width - 1)
    if height is not None:
        lo[1], hi[1] = np.clip([lo[1], hi[1]], 0, height - 1)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def _detect_scenes(model: StereoDetector, scenes, iterations: int, seed: int,
                   noise, threads: int, coarse_dir: str | None = None):
    """Run refinement over every object; returns per-scene predictions.

    Coarse boxes come from ground truth + noise, or from KITTI label
    files named <scene_id>.txt under ``coarse_dir``.  The second return
    value maps scene ids to their ground-truth label lists, ready for
    :func:`evaluate_detections`.
    """
    preds: dict = {}
    gts: dict = {}
    errors: list[float] = []
    for idx, sc in enumerate(scenes):
        if coarse_dir is not None:
            cpath = Path(coarse_dir) / f"{sc.scene_id}.txt"
            if not cpath.exists():
                raise InputError(f"no coarse boxes for scene {sc.scene_id} "
                                 f"under {coarse_dir}")
            coarse_boxes = [lb.to_box3d() for lb in parse_label_file(cpath)
                            if not lb.is_dontcare]
        else:
            coarse_boxes = []
            for oi, gt in enumerate(sc.gt_boxes):
                rng = np.random.default_rng([seed, idx, oi])
                coarse_boxes.append(perturb(gt, noise, rng))
        ps = []
        for ci, coarse in enumerate(coarse_boxes):
            outs = model.detect(sc.img_l, sc.img_r, sc.rig, coarse,
                                iterations=iterations, threads=threads)
            det = outs[-1].detection
            ps.append(ScoredBox(det.refined, det.confidence))
            if coarse_dir is None and ci < len(sc.gt_boxes):
                gt = sc.gt_boxes[ci]
                errors.append(float(np.linalg.norm(
                    box_params(det.refined)[:3] - box_params(gt)[:3])))
        preds[sc.scene_id] = ps
        gts[sc.scene_id] = list(sc.labels)
    mean_err = float(np.mean(errors)) if errors else float("nan")
    return preds, gts, mean_err


def _pooled(preds_by_scene: dict, gts_by_scene: dict):
    """Flatten scenes into one ranking; scenes pushed far apart in x."""
    flat_p, flat_g = [], []
    for k, sid in enumerate(sorted(preds_by_scene)):
        shift = 10000.0 * (k + 1)
        for p in preds_by_scene[sid]:
            flat_p.append(ScoredBox(
                dataclasses.replace(p.box, x=p.box.x + shift), p.score))
        for g in gts_by_scene.get(sid, []):
            flat_g.append(GroundTruth(
                dataclasses.replace(g.box, x=g.box.x + shift), g.included))
    return flat_p, flat_g


def _write_predictions(out_dir: Path, scenes, preds: dict) -> int:
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    by_id = {sc.scene_id: sc for sc in scenes}
    for sid, ps in preds.items():
        sc = by_id[sid]
        h, w = sc.img_l.shape[1], sc.img_l.shape[2]
        labels = [KittiLabel.from_box3d(
                      p.box, bbox=_bbox_of(p.box, sc.rig, w, h),
                      score=p.score) for p in ps]
        serialize_labels(pred_dir / f"{sid}.txt", labels)
        n += len(labels)
    return n


def _print_eval(result: EvalResult) -> None:
    for diff in result.ap_3d:
        for thr in sorted(result.ap_3d[diff]):
            print(f"{diff:<9} AP_3D@{thr:.2f} = {result.ap_3d[diff][thr]:6.2f}"
                  f"   AP_BEV@{thr:.2f} = {result.ap_bev[diff][thr]:6.2f}")
    print(f"ground truths: {result.gt_counts}   "
          f"predictions: {result.pred_count}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = int(args.scenes)
    if n < 1:
        raise InputError(f"need at least one scene, got {n}")
    ids = []
    for i in range(n):
        scene = render_synthetic(seed=int(args.seed) * 1_000_000 + i,
                                 n_objects=int(args.objects))
        scene = dataclasses.replace(scene, scene_id=f"{i:06d}")
        save_scene(out, scene)
        ids.append(scene.scene_id)
    train_ids = [sid for k, sid in enumerate(ids) if k % 5 != 4]
    val_ids = [sid for k, sid in enumerate(ids) if k % 5 == 4]
    write_split(out / "train.txt", train_ids)
    write_split(out / "val.txt", val_ids)
    print(f"wrote {n} scenes ({len(train_ids)} train / {len(val_ids)} val) "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    if not cfg.data_dir:
        raise ConfigError("no data directory (set data_dir or pass --data)")
    out = Path(cfg.out_dir or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    threads = _thread_count(cfg.threads)

    model = _model_from(cfg)
    if cfg.checkpoint:
        _load_weights(model, cfg.checkpoint)
    scenes = _load_scenes(cfg.data_dir, args.split)
    samples = [TrainSample(scene_id=sc.scene_id, img_l=sc.img_l,
                           img_r=sc.img_r, rig=sc.rig, gt_boxes=sc.gt_boxes)
               for sc in scenes]
    print(f"training on {len(samples)} scenes "
          f"({sum(len(s.gt_boxes) for s in samples)} objects), "
          f"{cfg.train.epochs} epochs, {threads} thread(s)")
    t0 = time.perf_counter()
    history = train(model, samples, cfg.train, out_dir=out, log=print)
    save_checkpoint(out / "model.fce", model.params)
    last = history[-1]
    print(f"finished in {time.perf_counter() - t0:.1f} s: "
          f"L_reg {last.l_reg:.4f}  L_cls {last.l_cls:.4f}  "
          f"checkpoint {out / 'model.fce'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config_from(args)
    if not cfg.data_dir:
        raise ConfigError("no data directory (set data_dir or pass --data)")
    out = Path(cfg.out_dir or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    threads = _thread_count(cfg.threads)

    model = _model_from(cfg)
    _load_weights(model, cfg.checkpoint)
    scenes = _load_scenes(cfg.data_dir, args.split)
    coarse_dir = args.coarse_dir if args.coarse == "file" else None
    if args.coarse == "file" and not coarse_dir:
        raise ConfigError("--coarse file requires --coarse-dir")
    preds, _, mean_err = _detect_scenes(
        model, scenes, cfg.iterations, cfg.seed, cfg.train.noise,
        threads, coarse_dir=coarse_dir)
    n = _write_predictions(out, scenes, preds)
    msg = (f"wrote {n} predictions over {len(scenes)} scenes to "
           f"{out / 'predictions'}")
    if np.isfinite(mean_err):
        msg += f"  (mean center error vs ground truth: {mean_err:.3f} m)"
    print(msg)
    return 0


def _read_label_dir(path: str) -> dict:
    root = Path(path)
    for candidate in (root / "predictions", root / "label_2", root):
        if candidate.is_dir() and list(candidate.glob("*.txt")):
            exclude = {"train", "val", "all"}
            return {p.stem: parse_label_file(p)
                    for p in sorted(candidate.glob("*.txt"))
                    if p.stem not in exclude}
    raise InputError(f"no label files found under {path}")


def cmd_eval(args) -> int:
    pred_labels = _read_label_dir(args.preds)
    gt_labels = _read_label_dir(args.gts)
    ids = sorted(set(pred_labels) & set(gt_labels))
    if not ids:
        raise InputError("prediction and ground-truth ids do not overlap")
    preds, curve_gts = {}, {}
    for sid in ids:
        preds[sid] = [ScoredBox(lb.to_box3d(),
                                lb.score if lb.score is not None else 0.0)
                      for lb in pred_labels[sid] if not lb.is_dontcare]
        curve_gts[sid] = [GroundTruth(lb.to_box3d())
                          for lb in gt_labels[sid] if not lb.is_dontcare]
    result = evaluate_detections(preds, {sid: gt_labels[sid] for sid in ids})
    out = Path(args.out or "runs/eval")
    flat_p, flat_g = _pooled(preds, curve_gts)
    curve = pr_points(flat_p, flat_g, iou3d, 0.5)
    write_report(out, result=result, pr_points=curve)
    _print_eval(result)
    print(f"report written to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_from(args)
    out = Path(cfg.out_dir or "runs/bench")
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    threads = _thread_count(cfg.threads)

    model = _model_from(cfg)
    if cfg.checkpoint:
        _load_weights(model, cfg.checkpoint)
    if cfg.data_dir:
        scenes = _load_scenes(cfg.data_dir, args.split)[:args.scenes]
    else:
        scenes = [render_synthetic(seed=7000 + i)
                  for i in range(args.scenes)]
    timings = bench(model, scenes, repetitions=args.repetitions,
                    threads=threads)
    write_report(out, timings=timings)
    for line in timings.report_lines():
        print(line.replace("\t", "  "))
    print(f"report written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite
    rows = run_suite(include_pipeline=not args.skip_pipeline)
    width = max(len(name) for name, _ in rows)
    print(f"{'op'.ljust(width)}  max_rel_err  status")
    worst = 0.0
    for name, err in rows:
        status = "ok" if err < TOLERANCE else "FAIL"
        worst = max(worst, err)
        print(f"{name.ljust(width)}  {err:10.3e}  {status}")
    print(f"worst {worst:.3e} (tolerance {TOLERANCE:g})")
    return 0 if worst < TOLERANCE else 1


def _ablate_rows_consistency(cfg: RunConfig, kinds: list[str], args,
                             threads: int) -> tuple[list[str], list[tuple]]:
    scenes_tr = _load_scenes(cfg.data_dir, "train")
    scenes_val = _load_scenes(cfg.data_dir, "val")
    samples = [TrainSample(scene_id=s.scene_id, img_l=s.img_l, img_r=s.img_r,
                           rig=s.rig, gt_boxes=s.gt_boxes)
               for s in scenes_tr]
    epochs = int(args.epochs)
    tcfg = dataclasses.replace(cfg.train, epochs=epochs,
                               decay_epoch=max(1, int(epochs * 0.8)))
    rows = []
    for kind in kinds:
        if kind not in KIND_FAMILY:
            raise ConfigError(f"unknown consistency kind {kind!r}; choose "
                              f"from {sorted(KIND_FAMILY)}")
        model = StereoDetector(feat_cfg=cfg.features, head_cfg=cfg.head,
                               fn=ConsistencyFn(kind=kind), resl=cfg.resl,
                               margin=cfg.margin)
        t0 = time.perf_counter()
        train(model, samples, tcfg)
        wall = time.perf_counter() - t0
        preds, gts, err = _detect_scenes(model, scenes_val, cfg.iterations,
                                         cfg.seed, cfg.train.noise, threads)
        res = evaluate_detections(preds, gts, thresholds=(0.5,))
        rows.append((kind, KIND_FAMILY[kind],
                     f"{res.ap_3d['moderate'][0.5]:.2f}",
                     f"{err:.3f}", f"{wall:.1f}"))
    return ["kind", "family", "ap3d@0.5", "center_err_m", "train_s"], rows


def _ablate_rows_resl(cfg: RunConfig, resls: list[int], args,
                      threads: int) -> tuple[list[str], list[tuple]]:
    scenes = _load_scenes(cfg.data_dir, args.split)
    rows = []
    for resl in resls:
        model = StereoDetector(feat_cfg=cfg.features, head_cfg=cfg.head,
                               fn=cfg.fn, resl=int(resl), margin=cfg.margin)
        _load_weights(model, cfg.checkpoint)
        preds, gts, err = _detect_scenes(model, scenes, cfg.iterations,
                                         cfg.seed, cfg.train.noise, threads)
        res = evaluate_detections(preds, gts, thresholds=(0.5,))
        sc = scenes[0]
        feats = model.extract_pair(sc.img_l, sc.img_r)
        grid = build_grid(sc.gt_boxes[0], int(resl), cfg.margin)
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            build_fce_fast(grid, feats[0], feats[1], sc.rig, model.fn,
                           params=model.params, threads=threads)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append((resl, f"{res.ap_3d['moderate'][0.5]:.2f}", f"{err:.3f}",
                     f"{np.median(times):.2f}"))
    return ["resl", "ap3d@0.5", "center_err_m", "fce_ms"], rows


def _ablate_rows_iterations(cfg: RunConfig, its: list[int], args,
                            threads: int) -> tuple[list[str], list[tuple]]:
    scenes = _load_scenes(cfg.data_dir, args.split)
    model = _model_from(cfg)
    _load_weights(model, cfg.checkpoint)
    rows = []
    for it in its:
        preds, gts, err = _detect_scenes(model, scenes, int(it), cfg.seed,
                                         cfg.train.noise, threads)
        res = evaluate_detections(preds, gts, thresholds=(0.5,))
        rows.append((it, f"{res.ap_3d['moderate'][0.5]:.2f}", f"{err:.3f}"))
    return ["iterations", "ap3d@0.5", "center_err_m"], rows


def cmd_ablate(args) -> int:
    chosen = [name for name in ("consistency", "resl", "iterations")
              if getattr(args, name)]
    if len(chosen) != 1:
        raise ConfigError("pass exactly one of --consistency, --resl, "
                          "--iterations")
    cfg = _config_from(args)
    if not cfg.data_dir:
        raise ConfigError("no data directory (set data_dir or pass --data)")
    out = Path(cfg.out_dir or "runs/ablate")
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    threads = _thread_count(cfg.threads)

    mode = chosen[0]
    if mode == "consistency":
        kinds = [k.strip() for k in args.consistency.split(",") if k.strip()]
        header, rows = _ablate_rows_consistency(cfg, kinds, args, threads)
    elif mode == "resl":
        resls = [int(v) for v in args.resl.split(",") if v.strip()]
        header, rows = _ablate_rows_resl(cfg, resls, args, threads)
    else:
        its = [int(v) for v in args.iterations.split(",") if v.strip()]
        header, rows = _ablate_rows_iterations(cfg, its, args, threads)

    lines = ["\t".join(str(c) for c in header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    (out / "ablate.tsv").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line.replace("\t", "  "))
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stereofce",
        description="Stereo 3D box refinement via feature-consistency "
                    "embedding volumes.")
    sub = p.add_subparsers(dest="cmd")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run config file (INI)")
        sp.add_argument("--out", help="run directory")
        sp.add_argument("--threads", type=int, default=0,
                        help="worker pool size (0 = machine default)")

    sp = sub.add_parser("synth", help="render a synthetic stereo dataset")
    sp.add_argument("--scenes", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--objects", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the refinement model")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", help="override data_dir from the config")
    sp.add_argument("--split", default="train",
                    choices=("train", "val", "all"))
    sp.add_argument("--out")
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("infer", help="refine coarse boxes into predictions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--coarse", default="gt-noise",
                    choices=("gt-noise", "file"))
    sp.add_argument("--coarse-dir",
                    help="directory of KITTI label files used as coarse "
                         "boxes (with --coarse file)")
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--preds", required=True)
    sp.add_argument("--gts", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="time each pipeline stage")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.add_argument("--scenes", type=int, default=3,
                    help="number of scenes to time")
    sp.add_argument("--repetitions", type=int, default=5)
    common(sp)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck",
                        help="finite-difference check of every op")
    sp.add_argument("--skip-pipeline", action="store_true",
                    help="only check individual ops")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="sweep one factor, report AP/timing")
    sp.add_argument("--consistency",
                    help="comma-separated consistency kinds (trains each)")
    sp.add_argument("--resl", help="comma-separated grid resolutions")
    sp.add_argument("--iterations", help="comma-separated iteration counts")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--split", default="val", choices=("train", "val", "all"))
    sp.add_argument("--epochs", type=int, default=12,
                    help="training epochs per consistency kind")
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cmd", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except StereoFceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

"""Average precision in the KITTI style, plus stage benchmarking.

Detections are scored boxes; ground truths are labels bucketed into
difficulty regimes by 2D box height, occlusion, and truncation.  Matching
is greedy in descending score with each ground truth claimed at most once.
Average precision integrates the precision envelope at 40 interpolated
recall points by default (11-point sampling is available for comparison
with older result tables).

Ground truths outside the difficulty regime under evaluation act as
ignore regions: a prediction overlapping one is dropped from the ranking
instead of counting as a false positive, which is how the devkit keeps
the regimes comparable.  "DontCare" labels are skipped entirely.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .geometry import Box3D, iou3d, iou_bev
from .dataio.kitti import KittiLabel

__all__ = [
    "DIFFICULTIES",
    "DIFFICULTY_CUTOFFS",
    "EvalResult",
    "StageTimings",
    "assign_difficulty",
    "match_and_ap",
    "evaluate_detections",
    "bench",
    "pr_curve_svg",
    "timing_bars_svg",
]

DIFFICULTIES = ("easy", "moderate", "hard")

# per regime: minimum 2D bbox height (px), maximum occlusion level,
# maximum truncation fraction
DIFFICULTY_CUTOFFS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


def assign_difficulty(label: KittiLabel) -> str:
    """Bucket a label into ``easy``/``moderate``/``hard`` or ``ignored``.

    Regimes are cumulative: a label that clears the easy cutoffs also
    clears moderate and hard, so the returned bucket is the easiest one
    the label qualifies for.
    """
    if label.is_dontcare:
        return "ignored"
    h = label.bbox_height
    for name in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_CUTOFFS[name]
        if h >= min_h and label.occluded <= max_occ and label.truncated <= max_trunc:
            return name
    return "ignored"


def _difficulty_rank(bucket: str) -> int:
    if bucket == "ignored":
        return len(DIFFICULTIES)
    return DIFFICULTIES.index(bucket)


@dataclass(frozen=True)
class ScoredBox:
    """One detection: a box with a ranking score."""

    box: Box3D
    score: float


@dataclass(frozen=True)
class GroundTruth:
    """One annotated box with its difficulty bucket.

    ``included`` selects whether the box counts as a target in the regime
    being evaluated; excluded boxes still absorb overlapping predictions.
    """

    box: Box3D
    included: bool = True


def _interp_recalls(n_points: int) -> np.ndarray:
    if n_points == 40:
        return (np.arange(40) + 1) / 40.0
    if n_points == 11:
        return np.arange(11) / 10.0
    raise ConfigError(f"AP interpolation must use 11 or 40 points, got {n_points}")


def match_and_ap(preds: Sequence[ScoredBox], gts: Sequence[GroundTruth],
                 iou_fn: Callable[[Box3D, Box3D], float], threshold: float,
                 n_points: int = 40) -> float:
    """Average precision (0..100) of ``preds`` against ``gts``.

    Predictions are visited in descending score.  Each one claims the
    highest-IoU unmatched ground truth at or above ``threshold``; a claim
    on an excluded ground truth removes the prediction from the ranking,
    anything else unmatched is a false positive.
    """
    for p in preds:
        if not np.isfinite(p.score):
            raise InputError(f"prediction score must be finite, got {p.score}")
    n_gt = sum(1 for g in gts if g.included)
    if n_gt == 0:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    claimed = [False] * len(gts)
    flags = []          # True = true positive, False = false positive
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if claimed[j]:
                continue
            iou = iou_fn(preds[i].box, g.box)
            if iou >= threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j < 0:
            flags.append(False)
        elif gts[best_j].included:
            claimed[best_j] = True
            flags.append(True)
        else:
            claimed[best_j] = True      # absorbed by an ignored box
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at any recall >= r
    ap = 0.0
    samples = _interp_recalls(n_points)
    for r in samples:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return 100.0 * ap / len(samples)


@dataclass(frozen=True)
class EvalResult:
    """AP per difficulty and IoU threshold, for 3D and bird's-eye boxes."""

    ap_3d: dict          # {difficulty: {threshold: ap}}
    ap_bev: dict
    gt_counts: dict      # {difficulty: int}
    pred_count: int

    def report_lines(self) -> list[str]:
        lines = ["metric\tdifficulty\tthreshold\tAP"]
        for name, table in (("AP_3D", self.ap_3d), ("AP_BEV", self.ap_bev)):
            for diff in DIFFICULTIES:
                for thr, ap in sorted(table[diff].items()):
                    lines.append(f"{name}\t{diff}\t{thr:g}\t{ap:.2f}")
        lines.append("gt_counts\t" + "\t".join(
            f"{d}={self.gt_counts[d]}" for d in DIFFICULTIES))
        lines.append(f"pred_count\t{self.pred_count}")
        return lines


def evaluate_detections(preds_by_scene: dict, gts_by_scene: dict,
                        thresholds: Sequence[float] = (0.5, 0.7),
                        n_points: int = 40) -> EvalResult:
    """Evaluate per-scene detections against per-scene labels.

    ``preds_by_scene``: scene id -> list[ScoredBox].
    ``gts_by_scene``: scene id -> list[KittiLabel].
    Scenes missing from the prediction map count as all-miss.
    """
    scene_ids = sorted(gts_by_scene)
    ap_3d: dict = {d: {} for d in DIFFICULTIES}
    ap_bev: dict = {d: {} for d in DIFFICULTIES}
    gt_counts = {d: 0 for d in DIFFICULTIES}
    pred_count = sum(len(v) for v in preds_by_scene.values())

    buckets = {sid: [(lab, assign_difficulty(lab)) for lab in gts_by_scene[sid]
                     if not lab.is_dontcare]
               for sid in scene_ids}
    for d_idx, diff in enumerate(DIFFICULTIES):
        gt_counts[diff] = sum(
            1 for sid in scene_ids for _, b in buckets[sid]
            if _difficulty_rank(b) <= d_idx)

    for diff_idx, diff in enumerate(DIFFICULTIES):
        for thr in thresholds:
            # offset scene geometry so cross-scene boxes can never overlap,
            # letting one global greedy ranking evaluate all scenes at once
            preds_all: list[ScoredBox] = []
            gts_all: list[GroundTruth] = []
            for k, sid in enumerate(scene_ids):
                shift = 10000.0 * k
                for lab, bucket in buckets[sid]:
                    b = lab.to_box3d()
                    gts_all.append(GroundTruth(
                        Box3D(b.x + shift, b.y, b.z, b.w, b.h, b.l, b.theta),
                        included=_difficulty_rank(bucket) <= diff_idx))
                for p in preds_by_scene.get(sid, []):
                    b = p.box
                    preds_all.append(ScoredBox(
                        Box3D(b.x + shift, b.y, b.z, b.w, b.h, b.l, b.theta),
                        p.score))
            ap_3d[diff][thr] = match_and_ap(preds_all, gts_all, iou3d, thr,
                                            n_points)
            ap_bev[diff][thr] = match_and_ap(preds_all, gts_all, iou_bev, thr,
                                             n_points)
    return EvalResult(ap_3d=ap_3d, ap_bev=ap_bev, gt_counts=gt_counts,
                      pred_count=pred_count)


# ---------------------------------------------------------------------------
# benchmarking


@dataclass(frozen=True)
class StageTimings:
    """Median milliseconds per pipeline stage over repeated runs."""

    feature_ms: float
    grid_ms: float
    fce_ms: float
    head_ms: float
    totals_per_iteration: dict      # {iterations: total ms}
    repetitions: int

    def report_lines(self) -> list[str]:
        lines = ["stage\tmedian_ms",
                 f"feature_extraction\t{self.feature_ms:.3f}",
                 f"latent_grid\t{self.grid_ms:.3f}",
                 f"fce_build\t{self.fce_ms:.3f}",
                 f"detector_head\t{self.head_ms:.3f}"]
        for it, total in sorted(self.totals_per_iteration.items()):
            lines.append(f"total_iterations={it}\t{total:.3f}")
        return lines


def bench(model, scenes: Sequence, repetitions: int = 5,
          iterations: Sequence[int] = (0, 1, 2),
          threads: int = 1) -> StageTimings:
    """Median wall time of each stage across ``scenes`` x ``repetitions``.

    ``scenes`` must provide ``img_l``, ``img_r``, ``rig``, and a coarse
    box per scene via ``gt_boxes[0]`` (benchmarking runs from ground
    truth; timing does not depend on where the box is).
    """
    from .grid import build_grid
    from .fce import build_fce_fast

    if repetitions < 1:
        raise InputError(f"repetitions must be >= 1, got {repetitions}")
    feat_t, grid_t, fce_t, head_t = [], [], [], []
    totals: dict = {int(it): [] for it in iterations}
    for sc in scenes:
        coarse = sc.gt_boxes[0]
        for _ in range(repetitions):
            t0 = time.perf_counter()
            feats = model.extract_pair(sc.img_l, sc.img_r)
            t1 = time.perf_counter()
            grid = build_grid(coarse, resl=model.resl, margin=model.margin)
            t2 = time.perf_counter()
            vol = build_fce_fast(grid, feats[0], feats[1], sc.rig, model.fn,
                                 params=model.params, threads=threads)
            t3 = time.perf_counter()
            model.head.decode(vol)
            t4 = time.perf_counter()
            feat_t.append((t1 - t0) * 1e3)
            grid_t.append((t2 - t1) * 1e3)
            fce_t.append((t3 - t2) * 1e3)
            head_t.append((t4 - t3) * 1e3)
        for it in iterations:
            t0 = time.perf_counter()
            model.detect(sc.img_l, sc.img_r, sc.rig, coarse,
                             iterations=int(it), threads=threads)
            totals[int(it)].append((time.perf_counter() - t0) * 1e3)
    return StageTimings(
        feature_ms=float(np.median(feat_t)),
        grid_ms=float(np.median(grid_t)),
        fce_ms=float(np.median(fce_t)),
        head_ms=float(np.median(head_t)),
        totals_per_iteration={it: float(np.median(v))
                              for it, v in totals.items()},
        repetitions=int(repetitions))


# ---------------------------------------------------------------------------
# SVG reports (self-contained, no plotting dependencies)


def _svg_header(width: int, height: int) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect width="{width}" height="{height}" fill="white"/>']


def pr_curve_svg(recall: np.ndarray, precision: np.ndarray,
                 title: str = "precision-recall") -> str:
    """Render one precision-recall polyline as a standalone SVG string."""
    w, h, pad = 420, 320, 45
    parts = _svg_header(w, h)
    parts.append(f'<text x="{w//2}" y="20" text-anchor="middle" '
                 f'font-size="14">{title}</text>')
    # axes
    parts.append(f'<line x1="{pad}" y1="{h-pad}" x2="{w-15}" y2="{h-pad}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{h-pad}" x2="{pad}" y2="30" '
                 'stroke="black"/>')
    for frac in (0.0, 0.5, 1.0):
        x = pad + frac * (w - 15 - pad)
        y = h - pad - frac * (h - pad - 30)
        parts.append(f'<text x="{x:.0f}" y="{h-pad+16}" text-anchor="middle" '
                     f'font-size="10">{frac:g}</text>')
        parts.append(f'<text x="{pad-8}" y="{y:.0f}" text-anchor="end" '
                     f'font-size="10">{frac:g}</text>')
    parts.append(f'<text x="{(w+pad)//2}" y="{h-8}" text-anchor="middle" '
                 'font-size="11">recall</text>')
    pts = []
    for r, p in zip(np.asarray(recall, dtype=float),
                    np.asarray(precision, dtype=float)):
        x = pad + r * (w - 15 - pad)
        y = h - pad - p * (h - pad - 30)
        pts.append(f"{x:.1f},{y:.1f}")
    if pts:
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" '
                     'stroke="#1f6fb2" stroke-width="2"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def timing_bars_svg(timings: StageTimings) -> str:
    """Render stage medians as a horizontal bar chart SVG string."""
    rows = [("features", timings.feature_ms), ("grid", timings.grid_ms),
            ("fce", timings.fce_ms), ("head", timings.head_ms)]
    rows += [(f"total it={k}", v)
             for k, v in sorted(timings.totals_per_iteration.items())]
    w, row_h, pad_l, pad_t = 460, 26, 110, 34
    h = pad_t + row_h * len(rows) + 16
    vmax = max(v for _, v in rows) or 1.0
    parts = _svg_header(w, h)
    parts.append(f'<text x="{w//2}" y="20" text-anchor="middle" '
                 'font-size="14">stage timings (median ms)</text>')
    for i, (name, val) in enumerate(rows):
        y = pad_t + i * row_h
        bw = (w - pad_l - 80) * val / vmax
        parts.append(f'<text x="{pad_l-6}" y="{y+15}" text-anchor="end" '
                     f'font-size="11">{name}</text>')
        parts.append(f'<rect x="{pad_l}" y="{y+3}" width="{bw:.1f}" '
                     f'height="{row_h-8}" fill="#2e8b57"/>')
        parts.append(f'<text x="{pad_l+bw+5:.1f}" y="{y+15}" '
                     f'font-size="11">{val:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(out_dir: str | Path, result: EvalResult | None = None,
                 timings: StageTimings | None = None,
                 pr_points: tuple | None = None) -> list[Path]:
    """Write TSV (and SVG) reports into ``out_dir``; returns paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if result is not None:
        p = out / "eval.tsv"
        p.write_text("\n".join(result.report_lines()) + "\n")
        written.append(p)
    if timings is not None:
        p = out / "bench.tsv"
        p.write_text("\n".join(timings.report_lines()) + "\n")
        written.append(p)
        p = out / "bench.svg"
        p.write_text(timing_bars_svg(timings))
        written.append(p)
    if pr_points is not None:
        recall, precision = pr_points
        p = out / "pr_curve.svg"
        p.write_text(pr_curve_svg(np.asarray(recall), np.asarray(precision)))
        written.append(p)
    return written


def pr_points(preds: Sequence[ScoredBox], gts: Sequence[GroundTruth],
              iou_fn: Callable[[Box3D, Box3D], float], threshold: float
              ) -> tuple[np.ndarray, np.ndarray]:
    """Raw (recall, precision) arrays of the greedy ranking, for plotting."""
    n_gt = sum(1 for g in gts if g.included)
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    claimed = [False] * len(gts)
    flags = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if claimed[j]:
                continue
            iou = iou_fn(preds[i].box, g.box)
            if iou >= threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j < 0:
            flags.append(False)
        elif gts[best_j].included:
            claimed[best_j] = True
            flags.append(True)
        else:
            claimed[best_j] = True
    if not flags or n_gt == 0:
        return np.zeros(1), np.zeros(1)
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    return tp / n_gt, tp / np.maximum(tp + fp, 1e-12)

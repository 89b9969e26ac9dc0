"""Pose-error metrics and report assembly.

MPJPE root-centers both joint sets at the pelvis (joint 0) before averaging
per-joint distances; PA-MPJPE first maps predictions onto ground truth with
the closed-form similarity alignment (scale included, reflections excluded).
Aggregates are folded left-to-right so reports are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .body_model import Joints3D
from .errors import DataError, DegenerateGeometryError, DimensionError, FormatError

REPORT_SCHEMA = "report.v1"


@dataclass
class SimilarityTransform:
    """x -> scale * rotation @ x + translation, with a proper rotation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.scale = float(self.scale)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise DimensionError("similarity transform must be 3D")
        if self.scale <= 0.0:
            raise DegenerateGeometryError("similarity scale must be positive")
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise DegenerateGeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise DegenerateGeometryError("rotation must be proper (det +1)")

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def _pts(x) -> np.ndarray:
    if isinstance(x, Joints3D):
        return x.points
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"expected (N, 3) points, got {arr.shape}")
    return arr


def mpjpe(pred, gt) -> float:
    """Mean per-joint distance (mm) after root-centering both sets at joint 0."""
    p, g = _pts(pred), _pts(gt)
    if p.shape != g.shape:
        raise DimensionError(f"joint count mismatch: {p.shape} vs {g.shape}")
    diff = (p - p[0]) - (g - g[0])
    return float(np.linalg.norm(diff, axis=1).mean())


def procrustes_align(pred, gt) -> SimilarityTransform:
    """Similarity transform minimizing sum ||s R p_i + t - g_i||^2."""
    p, g = _pts(pred), _pts(gt)
    if p.shape != g.shape:
        raise DimensionError(f"joint count mismatch: {p.shape} vs {g.shape}")
    n = p.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 points to align")
    mu_p, mu_g = p.mean(axis=0), g.mean(axis=0)
    pc, gc = p - mu_p, g - mu_g
    var_p = float((pc**2).sum()) / n
    cov = gc.T @ pc / n
    u, d, vt = np.linalg.svd(cov)
    if var_p <= 1e-12 or d[1] <= 1e-12 * max(d[0], 1.0):
        raise DegenerateGeometryError("point configuration has rank < 2")
    signs = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        signs[2] = -1.0
    rotation = u @ np.diag(signs) @ vt
    scale = float((d * signs).sum()) / var_p
    translation = mu_g - scale * rotation @ mu_p
    return SimilarityTransform(scale, rotation, translation)


def pa_mpjpe(pred, gt) -> float:
    """Mean per-joint distance after optimal similarity alignment."""
    p, g = _pts(pred), _pts(gt)
    aligned = procrustes_align(p, g).apply(p)
    return float(np.linalg.norm(aligned - g, axis=1).mean())


def alignment_residual(transform: SimilarityTransform, pred, gt) -> float:
    """Sum-of-squares objective the alignment minimizes; used by oracles."""
    p, g = _pts(pred), _pts(gt)
    return float(((transform.apply(p) - g) ** 2).sum())


def gap(initial_mm: float, refined_mm: float) -> float:
    """Refined minus initial error, reported to 2 decimals (negative = better)."""
    return float(round(float(refined_mm) - float(initial_mm), 2))


def _ltr_mean(values) -> float:
    total = 0.0
    n = 0
    for v in values:
        total += float(v)
        n += 1
    return total / n


@dataclass
class FrameMetrics:
    frame_id: str
    sequence: str
    mpjpe_mm: float
    pa_mpjpe_mm: float


@dataclass
class MetricsReport:
    """Per-frame errors plus left-to-right aggregate means and the gap
    against a supplied initial baseline."""

    per_frame: list
    mean_mpjpe_mm: float
    mean_pa_mpjpe_mm: float
    gap_vs_initial_mm: float | None
    baseline_mpjpe_mm: float | None
    config: dict


def build_report(per_frame, config: dict, initial_baseline_mm: float | None = None
                 ) -> MetricsReport:
    per_frame = list(per_frame)
    if not per_frame:
        raise DataError("cannot build a report from zero frames")
    mean_mp = _ltr_mean(m.mpjpe_mm for m in per_frame)
    mean_pa = _ltr_mean(m.pa_mpjpe_mm for m in per_frame)
    gap_mm = None if initial_baseline_mm is None else gap(initial_baseline_mm, mean_mp)
    baseline = None if initial_baseline_mm is None else float(initial_baseline_mm)
    return MetricsReport(per_frame, mean_mp, mean_pa, gap_mm, baseline, dict(config))


def report_to_json(report: MetricsReport) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "per_frame": [
            {
                "frame_id": m.frame_id,
                "sequence": m.sequence,
                "mpjpe_mm": m.mpjpe_mm,
                "pa_mpjpe_mm": m.pa_mpjpe_mm,
            }
            for m in report.per_frame
        ],
        "aggregate": {
            "mean_mpjpe_mm": report.mean_mpjpe_mm,
            "mean_pa_mpjpe_mm": report.mean_pa_mpjpe_mm,
            "gap_vs_initial_mm": report.gap_vs_initial_mm,
            "baseline_mpjpe_mm": report.baseline_mpjpe_mm,
        },
        "config": report.config,
    }
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


def report_from_json(text: str) -> MetricsReport:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != REPORT_SCHEMA:
        raise FormatError(f"expected schema {REPORT_SCHEMA!r}")
    try:
        per_frame = [
            FrameMetrics(m["frame_id"], m["sequence"], m["mpjpe_mm"], m["pa_mpjpe_mm"])
            for m in doc["per_frame"]
        ]
        agg = doc["aggregate"]
        return MetricsReport(
            per_frame,
            agg["mean_mpjpe_mm"],
            agg["mean_pa_mpjpe_mm"],
            agg["gap_vs_initial_mm"],
            agg["baseline_mpjpe_mm"],
            doc["config"],
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed report field: {exc}") from exc


def save_report(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report) + "\n")


def load_report(path) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as fh:
        return report_from_json(fh.read())


def write_report_grid(reports, path) -> None:
    """Ablation grid CSV: one row per teacher label, one column per
    (epochs, sigma) cell holding "MPJPE (gap)"."""
    import csv

    cells = {}
    teachers, columns = [], []
    baselines = {}
    for rep in reports:
        cfg = rep.config
        teacher = str(cfg.get("teacher", "teacher"))
        col = (int(cfg.get("epochs", 0)), float(cfg.get("sigma", 0.0)))
        if teacher not in teachers:
            teachers.append(teacher)
        if col not in columns:
            columns.append(col)
        gap_txt = "" if rep.gap_vs_initial_mm is None else f" ({rep.gap_vs_initial_mm:+.2f})"
        cells[(teacher, col)] = f"{rep.mean_mpjpe_mm:.2f}{gap_txt}"
        if rep.baseline_mpjpe_mm is not None:
            baselines[teacher] = f"{rep.baseline_mpjpe_mm:.2f}"
    columns.sort()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["teacher", "initial"]
            + [f"ep{e}-sigma{s:g}" for e, s in columns]
        )
        for teacher in sorted(teachers):
            row = [teacher, baselines.get(teacher, "")]
            row += [cells.get((teacher, col), "") for col in columns]
            writer.writerow(row)

"""Pose accuracy: cm-degree, 2D projection, ADD and ADD-S."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import BehindCamera
from .geom import Intrinsics, Pose, geodesic_angle_deg

DEFAULT_CMDEG = ((1.0, 1.0), (3.0, 3.0), (5.0, 5.0))


@dataclass(frozen=True)
class MetricConfig:
    proj2d_px: float = 5.0
    add_frac: float = 0.1
    cmdeg: tuple = DEFAULT_CMDEG

    def __post_init__(self):
        if self.proj2d_px <= 0 or self.add_frac <= 0:
            raise ValueError("thresholds must be positive")
        if any(c <= 0 or d <= 0 for c, d in self.cmdeg):
            raise ValueError("cm-degree thresholds must be positive")


def cm_degree_err(pred: Pose, gt: Pose) -> tuple[float, float]:
    return float(np.linalg.norm(pred.t - gt.t) * 100.0), geodesic_angle_deg(pred.r, gt.r)


def cm_degree_pass(cm: float, deg: float, c: float, d: float) -> bool:
    return cm <= c and deg <= d


def add(pred: Pose, gt: Pose, pts, diameter: float, cfg: MetricConfig = MetricConfig()):
    pts = np.asarray(pts, dtype=np.float64)
    dist = float(np.linalg.norm(pred.apply(pts) - gt.apply(pts), axis=1).mean())
    return dist, dist < cfg.add_frac * diameter


def adds(pred: Pose, gt: Pose, pts, diameter: float, cfg: MetricConfig = MetricConfig()):
    """Mean distance from each predicted point to the closest ground-truth point."""
    pts = np.asarray(pts, dtype=np.float64)
    a = pred.apply(pts)
    b = gt.apply(pts)
    nearest = np.concatenate([
        np.linalg.norm(a[s:s + 512, None] - b[None], axis=2).min(axis=1)
        for s in range(0, len(a), 512)])
    dist = float(nearest.mean())
    return dist, dist < cfg.add_frac * diameter


def proj2d(pred: Pose, gt: Pose, pts, k: Intrinsics, cfg: MetricConfig = MetricConfig()):
    pts = np.asarray(pts, dtype=np.float64)
    a = pred.apply(pts)
    b = gt.apply(pts)
    if np.any(a[:, 2] <= 1e-9) or np.any(b[:, 2] <= 1e-9):
        raise BehindCamera("model point behind the camera")
    ua = np.stack([k.fx * a[:, 0] / a[:, 2] + k.cx, k.fy * a[:, 1] / a[:, 2] + k.cy], -1)
    ub = np.stack([k.fx * b[:, 0] / b[:, 2] + k.cx, k.fy * b[:, 1] / b[:, 2] + k.cy], -1)
    err = float(np.linalg.norm(ua - ub, axis=1).mean())
    return err, err < cfg.proj2d_px


def diameter(pts) -> float:
    """Largest pairwise distance between model points."""
    pts = np.asarray(pts, dtype=np.float64)
    return float(max(np.linalg.norm(pts[s:s + 512, None] - pts[None], axis=2).max()
                     for s in range(0, len(pts), 512)))


@dataclass
class QueryResult:
    """Outcome of one query; ``pred`` is None when pose recovery failed."""

    object_id: str
    view: int
    gt: Pose
    pred: Optional[Pose]
    k: Optional[Intrinsics] = None
    pts: Optional[np.ndarray] = None
    diameter: Optional[float] = None
    symmetric: bool = False
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)


def evaluate_query(q: QueryResult, cfg: MetricConfig = MetricConfig()) -> dict:
    """Per-query metric row; failed queries count as failures for every threshold."""
    row = {"object": q.object_id, "view": q.view, "ok": q.pred is not None}
    if q.error:
        row["error"] = q.error
    row.update(q.extra)
    cols = column_names(cfg, q.pts is not None, q.k is not None)
    if q.pred is None:
        row.update({c: False for c in cols})
        row.update({"cm": None, "deg": None})
        return row
    cm, deg = cm_degree_err(q.pred, q.gt)
    row.update({"cm": cm, "deg": deg})
    for c, d in cfg.cmdeg:
        row[_cmdeg_name(c, d)] = cm_degree_pass(cm, deg, c, d)
    if q.pts is not None:
        dia = q.diameter if q.diameter is not None else diameter(q.pts)
        fn = adds if q.symmetric else add
        row["add_dist"], row["add"] = fn(q.pred, q.gt, q.pts, dia, cfg)
        row["adds_dist"], row["adds"] = adds(q.pred, q.gt, q.pts, dia, cfg)
        row["trans_frac"] = float(np.linalg.norm(q.pred.t - q.gt.t) / dia)
        if q.k is not None:
            try:
                row["proj2d_px"], row["proj2d"] = proj2d(q.pred, q.gt, q.pts, q.k, cfg)
            except BehindCamera:
                row["proj2d_px"], row["proj2d"] = None, False
    return row


def _cmdeg_name(c, d) -> str:
    return f"{c:g}cm-{d:g}deg"


def column_names(cfg: MetricConfig, with_model: bool = True, with_camera: bool = True) -> list[str]:
    cols = [_cmdeg_name(c, d) for c, d in cfg.cmdeg]
    if with_model:
        cols += ["add", "adds"]
        if with_camera:
            cols.append("proj2d")
    return cols


def report(results: Iterable[dict], cfg: MetricConfig = MetricConfig()) -> dict:
    """Per-object and mean accuracy-at-threshold percentages.

    ``results`` are rows from :func:`evaluate_query`. A column is reported for
    an object only if every row of that object carries it.
    """
    results = list(results)
    if not results:
        return {"columns": [], "objects": [], "mean": {}, "n_queries": 0}
    cols_all = column_names(cfg)
    by_obj: dict[str, list[dict]] = {}
    for r in results:
        by_obj.setdefault(str(r["object"]), []).append(r)
    columns = [c for c in cols_all if any(c in r for r in results)]
    objects = []
    for oid in sorted(by_obj):
        rows = by_obj[oid]
        entry = {"object": oid, "n": len(rows)}
        for c in columns:
            if all(c in r for r in rows):
                entry[c] = 100.0 * sum(bool(r[c]) for r in rows) / len(rows)
        objects.append(entry)
    mean = {}
    for c in columns:
        vals = [o[c] for o in objects if c in o]
        if vals:
            mean[c] = float(np.mean(vals))
    return {"columns": columns, "objects": objects, "mean": mean, "n_queries": len(results)}

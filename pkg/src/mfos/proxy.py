"""Proxy shapes and their rasterization into reference-coordinate pointmaps.

All intersection routines work in reference coordinates, where a cuboid
proxy is the cube [-1, 1]^3 and an ellipsoid proxy is the unit sphere.
The object-to-reference map is affine, so ray parameters carry over
unchanged from camera space.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidShape
from .geom import Intrinsics, Pose, RefFrame, ref_coords

KINDS = ("cuboid", "ellipsoid", "mesh")


@dataclass(frozen=True)
class ProxyShape:
    kind: str
    frame: RefFrame
    mesh: Optional[np.ndarray] = None  # (T, 3, 3) triangle vertices, object frame, meters

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidShape(f"unknown proxy kind {self.kind!r}")
        if self.kind == "mesh":
            if self.mesh is None:
                raise InvalidShape("mesh proxy requires a triangle list")
            tri = np.asarray(self.mesh, dtype=np.float64)
            if tri.ndim != 3 or tri.shape[1:] != (3, 3):
                raise InvalidShape(f"mesh must have shape (T, 3, 3), got {tri.shape}")
            area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
            if np.count_nonzero(area > 1e-12) < 4:
                raise InvalidShape("mesh needs at least 4 non-degenerate triangles")
            object.__setattr__(self, "mesh", tri)

    def with_kind(self, kind: str, mesh=None) -> "ProxyShape":
        return ProxyShape(kind, self.frame, mesh if mesh is not None else self.mesh)

    def with_frame(self, frame: RefFrame) -> "ProxyShape":
        return ProxyShape(self.kind, frame, self.mesh)


@dataclass
class PointMap:
    coords: np.ndarray  # (H, W, 3) reference coordinates
    mask: np.ndarray  # (H, W) bool
    frame: Optional[RefFrame] = None  # coordinate system the map is expressed in

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def empty(cls, h: int, w: int, frame=None) -> "PointMap":
        return cls(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool), frame)


def _nearest_nonneg(t0, t1, hit):
    t = np.where(t0 >= 0, t0, t1)
    hit = hit & (t1 >= 0)
    return np.where(hit, t, np.nan)


def box_hits(o, d):
    """Slab test against [-1, 1]^3 for rays (N, 3). Returns t (N,), NaN on miss."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-1.0 - o) * inv
        tb = (1.0 - o) * inv
    parallel = d == 0.0
    inside_slab = np.abs(o) <= 1.0
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(ta, tb))
    tnear = lo.max(axis=-1)
    tfar = hi.min(axis=-1)
    return _nearest_nonneg(tnear, tfar, tnear <= tfar)


def sphere_hits(o, d):
    """Nearest nonnegative root of |o + t d| = 1 for rays (N, 3)."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    a = np.einsum("...i,...i", d, d)
    b = 2.0 * np.einsum("...i,...i", o, d)
    c = np.einsum("...i,...i", o, o) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    return _nearest_nonneg(t0, t1, hit)


def triangle_hits(o, d, tris, chunk: int = 256):
    """Moller-Trumbore nearest hit over a flat triangle list (T, 3, 3)."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    best = np.full(o.shape[0], np.inf)
    for s in range(0, len(tris), chunk):
        tri = tris[s:s + chunk]
        v0 = tri[:, 0][None]
        e1 = (tri[:, 1] - tri[:, 0])[None]
        e2 = (tri[:, 2] - tri[:, 0])[None]
        dd = d[:, None]
        p = np.cross(dd, e2)
        det = np.einsum("ntk,ntk->nt", e1, p)
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o[:, None] - v0
        u = np.einsum("ntk,ntk->nt", tv, p) * inv
        q = np.cross(tv, e1)
        v = np.einsum("ntk,ntk->nt", dd, q) * inv
        t = np.einsum("ntk,ntk->nt", e2, q) * inv
        valid = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
        best = np.minimum(best, np.where(valid, t, np.inf).min(axis=1))
    return np.where(np.isfinite(best), best, np.nan)


def _check_unit(d):
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")


def ray_box_hit(origin, dir) -> Optional[float]:
    _check_unit(dir)
    t = box_hits(np.asarray(origin, float)[None], np.asarray(dir, float)[None])[0]
    return None if np.isnan(t) else float(t)


def ray_ellipsoid_hit(origin, dir) -> Optional[float]:
    _check_unit(dir)
    t = sphere_hits(np.asarray(origin, float)[None], np.asarray(dir, float)[None])[0]
    return None if np.isnan(t) else float(t)


def resize_intrinsics(k: Intrinsics, h: int, w: int) -> Intrinsics:
    """Intrinsics for the same view resampled to (h, w); pixel centers sit at integers."""
    if (h, w) == (k.height, k.width):
        return k
    sx, sy = w / k.width, h / k.height
    return Intrinsics(k.fx * sx, k.fy * sy, (k.cx + 0.5) * sx - 0.5,
                      (k.cy + 0.5) * sy - 0.5, w, h)


def camera_rays(k: Intrinsics, h: int, w: int):
    """Per-pixel ray directions (h*w, 3) with unit z, through integer pixel centers."""
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
    return d.reshape(-1, 3)


def reference_rays(frame: RefFrame, pose: Pose, k: Intrinsics, out_res):
    """Camera rays re-expressed in reference coordinates: origins and directions (h*w, 3)."""
    h, w = out_res
    k = resize_intrinsics(k, h, w)
    d_cam = camera_rays(k, h, w)
    o_obj = pose.camera_center()
    d_obj = d_cam @ pose.r  # rows: R^T d
    o_ref = ref_coords(frame, o_obj)
    d_ref = (d_obj @ frame.r) / frame.half_extents
    return np.broadcast_to(o_ref, d_ref.shape), d_ref


def hit_params(shape: ProxyShape, o_ref, d_ref):
    if shape.kind == "cuboid":
        return box_hits(o_ref, d_ref)
    if shape.kind == "ellipsoid":
        return sphere_hits(o_ref, d_ref)
    if shape.mesh is None:
        raise InvalidShape("mesh proxy requires a triangle list")
    tris = ref_coords(shape.frame, shape.mesh)
    return triangle_hits(np.ascontiguousarray(o_ref), d_ref, tris)


def render_pointmap(shape: ProxyShape, pose: Pose, k: Intrinsics, out_res) -> PointMap:
    """Nearest-hit reference coordinates of ``shape`` seen from ``pose``/``k``."""
    if shape.kind == "mesh" and shape.mesh is None:
        raise InvalidShape("mesh proxy requires a triangle list")
    h, w = out_res
    o_ref, d_ref = reference_rays(shape.frame, pose, k, out_res)
    t = hit_params(shape, o_ref, d_ref)
    mask = ~np.isnan(t)
    coords = np.zeros((h * w, 3))
    coords[mask] = o_ref[mask] + t[mask, None] * d_ref[mask]
    if shape.kind != "mesh":
        np.clip(coords, -1.0, 1.0, out=coords)
    return PointMap(coords.reshape(h, w, 3), mask.reshape(h, w), shape.frame)


def render_target(shape: ProxyShape, gt_pose: Pose, k: Intrinsics, out_res) -> PointMap:
    """Regression target for a query view; same rasterization as the pose encoding."""
    return render_pointmap(shape, gt_pose, k, out_res)


FACE_NORMALS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                        dtype=np.float64)


def cuboid_face_ids(coords: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Face index 0..5 (+x, -x, +y, -y, +z, -z) for each cuboid hit; -1 elsewhere."""
    axis = np.abs(coords).argmax(axis=-1)
    neg = np.take_along_axis(coords, axis[..., None], axis=-1)[..., 0] < 0
    return np.where(mask, 2 * axis + neg, -1)


def box_mesh(frame: RefFrame) -> np.ndarray:
    """Triangulated box surface (12, 3, 3) in object coordinates."""
    c = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, dd in quads:
        tris += [(a, b, cc), (a, cc, dd)]
    pts = (c * frame.half_extents) @ frame.r.T + frame.center
    return pts[np.array(tris)]

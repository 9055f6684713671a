"""Datasets: manifests, image and array files, cropping, batches, synthetic scenes.

Manifest layout (JSON, paths relative to the manifest's directory)::

    {"format": "mfos-manifest", "version": 1,
     "objects": [{"id": str,
                  "proxy": {"kind": "cuboid"|"ellipsoid"|"mesh", "dims": [3],
                            "center": [3], "R": [9], "mesh": [[[3]*3], ...]?},
                  "symmetric": bool?, "model_points": [[3], ...]?, "diameter": float?,
                  "views": [{"image": str, "R": [9], "t": [3],
                             "fx": f, "fy": f, "cx": f, "cy": f,
                             "width": int, "height": int, "bbox": [x0, y0, x1, y1]?}]}]}

``R`` is row-major, ``t`` in meters, the pose maps object to camera
coordinates. Bounding boxes use pixel-edge coordinates.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import proxy as P
from .errors import (BadIntrinsics, EmptyBBox, InsufficientViews, IoError, MissingFile,
                     ParseError)
from .geom import (Intrinsics, Pose, RefFrame, axis_angle, look_at,
                   perturb_frame, project, sample_frame_perturbation)
from .select import train_select

MANIFEST_FORMAT = "mfos-manifest"
MANIFEST_VERSION = 1


# --------------------------------------------------------------------------
# records

@dataclass
class ViewRecord:
    image: Path
    pose: Pose
    intrinsics: Intrinsics
    bbox2d: Optional[tuple] = None

    def to_json(self, root: Path) -> dict:
        d = {"image": os.path.relpath(self.image, root).replace(os.sep, "/"),
             **self.pose.to_json(), **self.intrinsics.to_json()}
        if self.bbox2d is not None:
            d["bbox"] = [float(v) for v in self.bbox2d]
        return d


@dataclass
class ObjectRecord:
    id: str
    proxy: P.ProxyShape
    views: list[ViewRecord]
    model_pts: Optional[np.ndarray] = None
    diameter: Optional[float] = None
    symmetric: bool = False

    def to_json(self, root: Path) -> dict:
        f = self.proxy.frame
        d = {"id": self.id,
             "proxy": {"kind": self.proxy.kind, "dims": (2 * f.half_extents).tolist(),
                       "center": f.center.tolist(), "R": f.r.reshape(-1).tolist()},
             "symmetric": self.symmetric,
             "views": [v.to_json(root) for v in self.views]}
        if self.proxy.mesh is not None:
            d["proxy"]["mesh"] = self.proxy.mesh.tolist()
        if self.model_pts is not None:
            d["model_points"] = np.asarray(self.model_pts).tolist()
        if self.diameter is not None:
            d["diameter"] = float(self.diameter)
        return d

    def poses(self) -> list[Pose]:
        return [v.pose for v in self.views]


def write_manifest(objs: Sequence[ObjectRecord], path) -> Path:
    path = Path(path)
    root = path.parent
    doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
           "objects": [o.to_json(root) for o in objs]}
    try:
        path.write_text(json.dumps(doc, indent=1))
    except OSError as e:
        raise IoError(f"cannot write manifest {path}: {e}") from e
    return path


def _parse_object(d: dict, root: Path, check_files: bool) -> ObjectRecord:
    pd = d["proxy"]
    dims = np.asarray(pd["dims"], dtype=np.float64)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise ParseError(f"object {d.get('id')}: proxy dims must be 3 positive numbers")
    frame = RefFrame(pd.get("center", [0, 0, 0]), dims / 2.0,
                     np.asarray(pd.get("R", np.eye(3).ravel()), dtype=np.float64))
    mesh = np.asarray(pd["mesh"], dtype=np.float64) if "mesh" in pd else None
    shape = P.ProxyShape(pd.get("kind", "cuboid"), frame, mesh)
    views = []
    for v in d["views"]:
        img = root / v["image"]
        if check_files and not img.is_file():
            raise MissingFile(f"image not found: {img}")
        k = Intrinsics(float(v["fx"]), float(v["fy"]), float(v["cx"]), float(v["cy"]),
                       int(v["width"]), int(v["height"]))
        if check_files:
            with Image.open(img) as im:
                if im.size != (k.width, k.height):
                    raise BadIntrinsics(f"{img}: image is {im.size[0]}x{im.size[1]}, "
                                        f"intrinsics say {k.width}x{k.height}")
        pose = Pose(np.asarray(v["R"], dtype=np.float64).reshape(3, 3), v["t"])
        bbox = tuple(float(x) for x in v["bbox"]) if v.get("bbox") is not None else None
        views.append(ViewRecord(img, pose, k, bbox))
    if not views:
        raise ParseError(f"object {d.get('id')} has no views")
    pts = np.asarray(d["model_points"], dtype=np.float64) if "model_points" in d else None
    return ObjectRecord(str(d["id"]), shape, views, pts, d.get("diameter"),
                        bool(d.get("symmetric", False)))


def load_manifest(path, check_files: bool = True) -> list[ObjectRecord]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if doc.get("format", MANIFEST_FORMAT) != MANIFEST_FORMAT:
        raise ParseError(f"{path}: not an mfos manifest")
    try:
        return [_parse_object(o, path.parent, check_files) for o in doc["objects"]]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (BadIntrinsics, ParseError)):
            raise
        raise ParseError(f"{path}: malformed record ({e!r})") from e


def find_object(objs: Sequence[ObjectRecord], object_id: str) -> ObjectRecord:
    for o in objs:
        if o.id == object_id:
            return o
    raise ParseError(f"no object {object_id!r} in manifest")


# --------------------------------------------------------------------------
# files

def read_image(path) -> np.ndarray:
    """RGB image as float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as e:
        raise MissingFile(f"image not found: {path}") from e


def write_image(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


# raw array container:
#   magic "MFOSARR\0" | version u32 | dtype u32 (1=f32, 2=f64, 3=u8) | ndim u32 | dims u32*ndim
#   | little-endian payload
ARR_MAGIC = b"MFOSARR\0"
_DTYPES = {1: "<f4", 2: "<f8", 3: "u1"}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint8"): 3}


def write_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as f:
        f.write(ARR_MAGIC)
        f.write(struct.pack("<III", 1, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes())


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != ARR_MAGIC:
        raise ParseError(f"{path}: not an mfos array file")
    version, code, ndim = struct.unpack_from("<III", data, 8)
    if version != 1 or code not in _DTYPES:
        raise ParseError(f"{path}: unsupported header (version {version}, dtype {code})")
    shape = struct.unpack_from(f"<{ndim}I", data, 20)
    off = 20 + 4 * ndim
    if len(data) - off != math.prod(shape) * np.dtype(_DTYPES[code]).itemsize:
        raise ParseError(f"{path}: payload size does not match shape {shape}")
    arr = np.frombuffer(data, dtype=_DTYPES[code], offset=off, count=math.prod(shape))
    return arr.reshape(shape).copy()


def write_pointmap(prefix, pm: P.PointMap) -> None:
    write_array(f"{prefix}.coords.bin", pm.coords.astype(np.float32))
    write_array(f"{prefix}.mask.bin", pm.mask)


# --------------------------------------------------------------------------
# crop and resize

@dataclass(frozen=True)
class CropAugment:
    shift: float = 0.0  # max center shift, fraction of crop side
    scale: float = 0.0  # crop side scaled by U(1 - scale, 1 + scale)
    rotation: float = 0.0  # max in-plane rotation, degrees

    def __post_init__(self):
        if not 0 <= self.scale < 1 or self.shift < 0 or self.rotation < 0:
            raise ValueError("crop augmentation ranges must be nonnegative, scale < 1")

    def is_identity(self) -> bool:
        return self.shift == 0 and self.scale == 0 and self.rotation == 0


class Crop(NamedTuple):
    image: np.ndarray
    intrinsics: Intrinsics
    rotation: np.ndarray  # virtual-camera rotation to left-multiply onto view poses


CROP_MARGIN = 1.2


def _align_z(ray) -> np.ndarray:
    """Smallest rotation taking direction ``ray`` onto +z."""
    d = np.asarray(ray, dtype=np.float64)
    d = d / np.linalg.norm(d)
    axis = np.cross(d, [0.0, 0.0, 1.0])
    sin = np.linalg.norm(axis)
    if sin < 1e-15:
        return np.eye(3)
    return axis_angle(axis / sin, math.atan2(sin, d[2]))


def crop_resize(img: np.ndarray, bbox2d, out_res: int, k: Intrinsics,
                aug: Optional[CropAugment] = None, rng: Optional[np.random.Generator] = None,
                margin: float = CROP_MARGIN) -> Crop:
    """Square crop around ``bbox2d`` resampled to ``out_res``; intrinsics follow the crop.

    The crop side is ``margin`` times the longer bbox side, capped at the longer
    image side. A crop is a shift-and-scale of pixels while the shifted
    principal point stays inside the output. Otherwise the crop is rendered by
    a virtual camera turned to look at the crop center, so the principal point
    becomes the output center. In-plane rotation is a roll of that camera
    (square pixels only). Either way ``project(intrinsics, rotation @ X)``
    agrees with the resampled image.
    """
    h, w = img.shape[:2]
    x0, y0, x1, y1 = (float(v) for v in bbox2d)
    if x1 <= x0 or y1 <= y0:
        raise EmptyBBox(f"empty bounding box {bbox2d}")
    side = min(margin * max(x1 - x0, y1 - y0), float(max(h, w)))
    cx_in, cy_in = 0.5 * (x0 + x1) - 0.5, 0.5 * (y0 + y1) - 0.5
    theta = 0.0
    if aug is not None and not aug.is_identity():
        rng = rng if rng is not None else np.random.default_rng()
        cx_in += rng.uniform(-aug.shift, aug.shift) * side
        cy_in += rng.uniform(-aug.shift, aug.shift) * side
        side *= rng.uniform(1.0 - aug.scale, 1.0 + aug.scale)
        theta = math.radians(rng.uniform(-aug.rotation, aug.rotation))
    if theta != 0.0 and not math.isclose(k.fx, k.fy, rel_tol=1e-9):
        raise ValueError("in-plane rotation augmentation needs fx == fy")
    s = out_res / side
    c_out = (out_res - 1) / 2.0
    roll = axis_angle([0, 0, 1], theta) if theta != 0.0 else np.eye(3)
    pp = s * roll[:2, :2] @ np.array([k.cx - cx_in, k.cy - cy_in]) + c_out
    if np.all((pp >= 0) & (pp < out_res)):
        rot = roll
    else:
        rot = roll @ _align_z([(cx_in - k.cx) / k.fx, (cy_in - k.cy) / k.fy, 1.0])
        pp = np.array([c_out, c_out])
    k_out = Intrinsics(k.fx * s, k.fy * s, float(pp[0]), float(pp[1]), out_res, out_res)
    if theta == 0.0 and s == 1.0 and cx_in == c_out and cy_in == c_out and (h, w) == (out_res,) * 2:
        return Crop(np.array(img, copy=True), k_out, rot)
    # output pixel -> ray in the virtual camera -> ray in the source camera -> source pixel
    v, u = np.mgrid[0:out_res, 0:out_res].astype(np.float64)
    rays = np.stack([(u - k_out.cx) / k_out.fx, (v - k_out.cy) / k_out.fy, np.ones_like(u)], -1)
    src = rays @ rot
    z = np.where(src[..., 2] > 1e-12, src[..., 2], np.nan)
    src_u = k.fx * src[..., 0] / z + k.cx
    src_v = k.fy * src[..., 1] / z + k.cy
    out = np.stack([ndimage.map_coordinates(img[..., c], [src_v, src_u], order=1, mode="constant",
                                            cval=0.0) for c in range(img.shape[2])], axis=-1)
    return Crop(np.nan_to_num(out).astype(img.dtype), k_out, rot)


def full_bbox(k: Intrinsics) -> tuple:
    return (0.0, 0.0, float(k.width), float(k.height))


# --------------------------------------------------------------------------
# training batches

@dataclass(frozen=True)
class BatchSpec:
    b: int = 2
    n_q: int = 2
    n_r: int = 4
    n_random: Optional[int] = None  # random picks among references; default n_r // 4

    def __post_init__(self):
        if min(self.b, self.n_q, self.n_r) < 1:
            raise ValueError("batch counts must be >= 1")

    @property
    def randoms(self) -> int:
        return self.n_r // 4 if self.n_random is None else self.n_random

    @property
    def images(self) -> int:
        return self.b * (self.n_q + self.n_r)


PAPER_BATCH = BatchSpec(16, 16, 32, 8)
TOY_BATCH = BatchSpec(2, 2, 4)


@dataclass(frozen=True)
class AugmentConfig:
    frame_rotate: bool = False
    frame_trans: float = 0.0
    frame_scale: float = 0.0
    crop: CropAugment = CropAugment()

    @property
    def perturbs_frame(self) -> bool:
        return self.frame_rotate or self.frame_trans > 0 or self.frame_scale > 0


PAPER_AUGMENT = AugmentConfig(True, 0.1, 0.1, CropAugment(0.1, 0.1, 10.0))
NO_AUGMENT = AugmentConfig()


@dataclass
class Batch:
    q_img: np.ndarray  # (B, NQ, H, W, 3)
    q_coords: np.ndarray  # (B, NQ, H, W, 3)
    q_mask: np.ndarray  # (B, NQ, H, W)
    r_img: np.ndarray  # (B, NR, H, W, 3)
    r_map: np.ndarray  # (B, NR, H, W, 3)
    q_idx: list = field(default_factory=list)
    r_idx: list = field(default_factory=list)
    frames: list = field(default_factory=list)  # per object, per rendered map


class ImageCache:
    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def __call__(self, path) -> np.ndarray:
        path = Path(path)
        if path not in self._cache:
            self._cache[path] = read_image(path)
        return self._cache[path]


def split_views(n_views: int, holdout_every: int = 8) -> tuple[list[int], list[int]]:
    """Deterministic split: every ``holdout_every``-th view (offset -1) is held out."""
    if holdout_every <= 0:
        return list(range(n_views)), []
    test = [i for i in range(n_views) if i % holdout_every == holdout_every - 1]
    train = [i for i in range(n_views) if i % holdout_every != holdout_every - 1]
    return train, test


class ViewCrop(NamedTuple):
    image: np.ndarray
    pointmap: P.PointMap
    pose: Pose  # pose in the crop's virtual camera
    intrinsics: Intrinsics
    rotation: np.ndarray  # crop camera = rotation @ original camera


def prepare_view(obj: ObjectRecord, view: ViewRecord, shape: P.ProxyShape, res: int,
                 images: ImageCache, aug: Optional[CropAugment], rng) -> ViewCrop:
    """Crop one view and render ``shape`` under its crop-camera pose."""
    img = images(view.image)
    bbox = view.bbox2d if view.bbox2d is not None else full_bbox(view.intrinsics)
    crop = crop_resize(img, bbox, res, view.intrinsics, aug, rng)
    pose = Pose(crop.rotation @ view.pose.r, crop.rotation @ view.pose.t)
    pm = P.render_pointmap(shape, pose, crop.intrinsics, (res, res))
    return ViewCrop(crop.image, pm, pose, crop.intrinsics, crop.rotation)


def make_batch(objs: Sequence[ObjectRecord], spec: BatchSpec, rng: np.random.Generator,
               res: int, augment: AugmentConfig = NO_AUGMENT,
               view_pool: Optional[dict] = None, images: Optional[ImageCache] = None) -> Batch:
    """Assemble a training batch.

    Per object: references from :func:`~mfos.select.train_select`, queries
    uniformly from the remaining views, and one frame perturbation shared by
    every reference encoding and query target of that object.
    """
    images = images or ImageCache()
    if len(objs) < spec.b:
        raise InsufficientViews(f"batch needs {spec.b} objects, manifest has {len(objs)}")
    obj_idx = rng.choice(len(objs), size=spec.b, replace=False)
    qi, qc, qm, ri, rm = [], [], [], [], []
    q_ids, r_ids, frames = [], [], []
    for oi in obj_idx:
        obj = objs[int(oi)]
        pool = list(view_pool[obj.id]) if view_pool else list(range(len(obj.views)))
        if len(pool) < spec.n_q + spec.n_r:
            raise InsufficientViews(f"object {obj.id}: {len(pool)} views, "
                                    f"need {spec.n_q + spec.n_r}")
        sel = train_select([obj.views[i].pose for i in pool], rng, spec.randoms, spec.n_r)
        refs = [pool[i] for i in sel]
        rest = [i for i in pool if i not in set(refs)]
        queries = [rest[int(i)] for i in rng.choice(len(rest), size=spec.n_q, replace=False)]
        frame = obj.proxy.frame
        if augment.perturbs_frame:
            pert = sample_frame_perturbation(rng, augment.frame_rotate, augment.frame_trans,
                                             augment.frame_scale)
            frame = perturb_frame(frame, pert)
        shape = obj.proxy.with_frame(frame)
        crop_aug = None if augment.crop.is_identity() else augment.crop
        obj_frames = []
        row_img, row_map = [], []
        for vi in refs:
            img, pm, *_ = prepare_view(obj, obj.views[vi], shape, res, images, crop_aug, rng)
            row_img.append(img)
            row_map.append(pm.coords)
            obj_frames.append(pm.frame)
        q_img, q_crd, q_msk = [], [], []
        for vi in queries:
            img, pm, *_ = prepare_view(obj, obj.views[vi], shape, res, images, crop_aug, rng)
            q_img.append(img)
            q_crd.append(pm.coords)
            q_msk.append(pm.mask)
            obj_frames.append(pm.frame)
        qi.append(q_img)
        qc.append(q_crd)
        qm.append(q_msk)
        ri.append(row_img)
        rm.append(row_map)
        q_ids.append((obj.id, queries))
        r_ids.append((obj.id, refs))
        frames.append(obj_frames)
    return Batch(np.asarray(qi, np.float32), np.asarray(qc, np.float32), np.asarray(qm, bool),
                 np.asarray(ri, np.float32), np.asarray(rm, np.float32), q_ids, r_ids, frames)


# --------------------------------------------------------------------------
# synthetic scenes

LIGHT_DIR = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
BACKGROUND = 0.08


def face_colors(rng: np.random.Generator) -> np.ndarray:
    """Six well-separated saturated colors in random order."""
    import colorsys

    hues = (rng.uniform() + np.arange(6) / 6.0) % 1.0
    sat = rng.uniform(0.55, 0.95, size=6)
    val = rng.uniform(0.75, 1.0, size=6)
    cols = np.array([colorsys.hsv_to_rgb(h, s, v) for h, s, v in zip(hues, sat, val)])
    return cols[rng.permutation(6)]


def shade_cuboid(pm: P.PointMap, colors: np.ndarray, frame: RefFrame) -> np.ndarray:
    """Flat face colors with Lambertian shading from a light fixed in the object frame."""
    face = P.cuboid_face_ids(pm.coords, pm.mask)
    normals_obj = P.FACE_NORMALS @ frame.r.T
    lam = 0.35 + 0.65 * np.clip(normals_obj @ LIGHT_DIR, 0.0, 1.0)
    img = np.full(pm.coords.shape, BACKGROUND)
    hit = face >= 0
    img[hit] = colors[face[hit]] * lam[face[hit], None]
    return img


def cuboid_model_points(frame: RefFrame) -> np.ndarray:
    """Corners, edge midpoints and face centers of the box (26 points)."""
    g = np.array([[x, y, z] for x in (-1, 0, 1) for y in (-1, 0, 1) for z in (-1, 0, 1)
                  if (x, y, z) != (0, 0, 0)], dtype=np.float64)
    return (g * frame.half_extents) @ frame.r.T + frame.center


def projected_bbox(pts_cam: np.ndarray, k: Intrinsics) -> tuple:
    uv = project(k, pts_cam)
    x0, y0 = np.clip(uv.min(axis=0) + 0.5, 0, [k.width, k.height])
    x1, y1 = np.clip(uv.max(axis=0) + 0.5, 0, [k.width, k.height])
    return (float(x0), float(y0), float(x1), float(y1))


def synth_views(frame: RefFrame, n_views: int, res: int, rng: np.random.Generator,
                fill: float = 0.8, focal_ratio: float = 1.2) -> list[tuple[Pose, Intrinsics]]:
    f = focal_ratio * res
    k = Intrinsics(f, f, (res - 1) / 2.0, (res - 1) / 2.0, res, res)
    diag = 2.0 * float(np.linalg.norm(frame.half_extents))
    base = f * diag / (fill * res)
    out = []
    for _ in range(n_views):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        dist = base * rng.uniform(0.9, 1.1)
        target = frame.center + rng.uniform(-0.05, 0.05, size=3) * diag
        pose = look_at(frame.center + dist * d, target)
        roll = axis_angle([0, 0, 1], math.radians(rng.uniform(-10.0, 10.0)))
        out.append((Pose(roll @ pose.r, roll @ pose.t), k))
    return out


def synth_generate(n_objects: int, views_per_object: int, res: int, rng: np.random.Generator,
                   out_dir) -> Path:
    """Write a procedural dataset of colored boxes and return the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create output directory {out_dir}: {e}") from e
    if not out_dir.is_dir() or not os.access(out_dir, os.W_OK):
        raise IoError(f"output directory {out_dir} is not writable")
    objs = []
    for oi in range(n_objects):
        oid = f"obj_{oi:03d}"
        dims = rng.uniform(0.06, 0.16, size=3)
        frame = RefFrame.from_dims(dims)
        colors = face_colors(rng)
        shape = P.ProxyShape("cuboid", frame)
        (out_dir / oid).mkdir(exist_ok=True)
        pts = cuboid_model_points(frame)
        views = []
        for vi, (pose, k) in enumerate(synth_views(frame, views_per_object, res, rng)):
            pm = P.render_pointmap(shape, pose, k, (res, res))
            path = out_dir / oid / f"{vi:04d}.png"
            write_image(path, shade_cuboid(pm, colors, frame))
            corners = P.box_mesh(frame).reshape(-1, 3)
            views.append(ViewRecord(path, pose, k, projected_bbox(pose.apply(corners), k)))
        objs.append(ObjectRecord(oid, shape, views, pts, float(2 * np.linalg.norm(frame.half_extents))))
    return write_manifest(objs, out_dir / "manifest.json")


# --------------------------------------------------------------------------
# BOP conversion (scene_gt.json / scene_camera.json subset)

def bop_to_manifest(scene_dir, models_info, out_path, obj_ids: Optional[Sequence[int]] = None,
                    image_dir: str = "rgb", ext: str = ".png") -> Path:
    """Convert one BOP scene into a manifest; millimeters become meters.

    Only the first instance of each object per image is used. Proxy boxes come
    from the ``min_*``/``size_*`` entries of ``models_info.json``.
    """
    scene_dir = Path(scene_dir)
    try:
        gt = json.loads((scene_dir / "scene_gt.json").read_text())
        cams = json.loads((scene_dir / "scene_camera.json").read_text())
        info = json.loads(Path(models_info).read_text())
        gt_info_path = scene_dir / "scene_gt_info.json"
        gt_info = json.loads(gt_info_path.read_text()) if gt_info_path.is_file() else {}
    except FileNotFoundError as e:
        raise MissingFile(str(e)) from e
    except json.JSONDecodeError as e:
        raise ParseError(str(e)) from e
    views: dict[int, list[ViewRecord]] = {}
    for im_id in sorted(gt, key=int):
        cam = cams[im_id]
        kk = np.asarray(cam["cam_K"], dtype=np.float64).reshape(3, 3)
        img = scene_dir / image_dir / f"{int(im_id):06d}{ext}"
        if not img.is_file():
            raise MissingFile(f"image not found: {img}")
        with Image.open(img) as im:
            width, height = im.size
        k = Intrinsics(kk[0, 0], kk[1, 1], kk[0, 2], kk[1, 2], width, height)
        seen = set()
        for inst, ann in enumerate(gt[im_id]):
            oid = int(ann["obj_id"])
            if oid in seen or (obj_ids is not None and oid not in obj_ids):
                continue
            seen.add(oid)
            pose = Pose(np.asarray(ann["cam_R_m2c"], float).reshape(3, 3),
                        np.asarray(ann["cam_t_m2c"], float) / 1000.0)
            bbox = None
            gi = gt_info.get(im_id)
            if gi and inst < len(gi) and "bbox_obj" in gi[inst]:
                x, y, bw, bh = gi[inst]["bbox_obj"]
                if bw > 0 and bh > 0:
                    bbox = (float(x), float(y), float(x + bw), float(y + bh))
            views.setdefault(oid, []).append(ViewRecord(img, pose, k, bbox))
    objs = []
    for oid in sorted(views):
        mi = info[str(oid)]
        mins = np.array([mi["min_x"], mi["min_y"], mi["min_z"]], float) / 1000.0
        size = np.array([mi["size_x"], mi["size_y"], mi["size_z"]], float) / 1000.0
        frame = RefFrame(mins + size / 2.0, size / 2.0)
        objs.append(ObjectRecord(f"obj_{oid:06d}", P.ProxyShape("cuboid", frame), views[oid],
                                 cuboid_model_points(frame), float(mi["diameter"]) / 1000.0,
                                 bool(mi.get("symmetries_discrete") or mi.get("symmetries_continuous"))))
    return write_manifest(objs, out_path)

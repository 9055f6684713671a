"""Rigid transforms, pinhole projection and the normalized object frame.

Conventions: camera looks down +z, x right, y down. A :class:`Pose` maps
object coordinates into the camera frame, ``x_cam = r @ x_obj + t``.
Everything here is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadIntrinsics, NonPositiveDepth

_DEPTH_EPS = 1e-9


def _as_rot(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64).reshape(3, 3)
    return m


@dataclass(frozen=True)
class Pose:
    r: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "r", _as_rot(self.r))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.t))):
            raise ValueError("pose entries must be finite")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def apply(self, x) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return np.asarray(x, dtype=np.float64) @ self.r.T + self.t

    def camera_center(self) -> np.ndarray:
        """Camera position expressed in the object frame."""
        return -self.r.T @ self.t

    def to_json(self) -> dict:
        return {"R": self.r.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise BadIntrinsics(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise BadIntrinsics(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class RefFrame:
    """Box-aligned frame taking the object bounding box onto [-1, 1]^3."""

    center: np.ndarray
    half_extents: np.ndarray
    r: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "half_extents",
                           np.asarray(self.half_extents, dtype=np.float64).reshape(3))
        object.__setattr__(self, "r", _as_rot(self.r))
        if np.any(self.half_extents <= 0):
            raise ValueError(f"half_extents must be positive, got {self.half_extents}")

    @classmethod
    def from_dims(cls, dims, center=(0.0, 0.0, 0.0)) -> "RefFrame":
        return cls(np.asarray(center, float), np.asarray(dims, float) / 2.0, np.eye(3))

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "half_extents": self.half_extents.tolist(),
                "R": self.r.reshape(-1).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "RefFrame":
        return cls(d["center"], d["half_extents"], np.asarray(d.get("R", np.eye(3).ravel())))


@dataclass(frozen=True)
class FramePerturbation:
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans_frac: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rot", _as_rot(self.rot))
        object.__setattr__(self, "trans_frac",
                           np.asarray(self.trans_frac, dtype=np.float64).reshape(3))
        if np.any(np.abs(self.trans_frac) > 0.1 + 1e-12):
            raise ValueError("trans_frac must lie in [-0.1, 0.1]")
        if not 0.9 - 1e-12 <= self.scale <= 1.1 + 1e-12:
            raise ValueError("scale must lie in [0.9, 1.1]")

    @classmethod
    def identity(cls) -> "FramePerturbation":
        return cls()


def compose(a: Pose, b: Pose) -> Pose:
    """Apply ``b`` first, then ``a``."""
    return Pose(a.r @ b.r, a.r @ b.t + a.t)


def invert(p: Pose) -> Pose:
    rt = p.r.T
    return Pose(rt, -rt @ p.t)


def project(k: Intrinsics, x_cam) -> np.ndarray:
    """Pinhole projection of points (..., 3) to pixels (..., 2)."""
    x = np.asarray(x_cam, dtype=np.float64)
    z = x[..., 2]
    if np.any(z <= _DEPTH_EPS):
        raise NonPositiveDepth("point at or behind the camera plane")
    u = k.fx * x[..., 0] / z + k.cx
    v = k.fy * x[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def unproject(k: Intrinsics, uv, depth) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - k.cx) / k.fx * z
    y = (uv[..., 1] - k.cy) / k.fy * z
    return np.stack([x, y, np.broadcast_to(z, x.shape)], axis=-1)


def ref_coords(f: RefFrame, x_obj) -> np.ndarray:
    """Object-frame points (..., 3) to reference coordinates."""
    x = np.asarray(x_obj, dtype=np.float64)
    return ((x - f.center) @ f.r) / f.half_extents


def denormalize(f: RefFrame, x_ref) -> np.ndarray:
    x = np.asarray(x_ref, dtype=np.float64)
    return (x * f.half_extents) @ f.r.T + f.center


def perturb_frame(f: RefFrame, p: FramePerturbation) -> RefFrame:
    shift = f.r @ (p.trans_frac * 2.0 * f.half_extents)
    return RefFrame(f.center + shift, f.half_extents * p.scale, p.rot @ f.r)


def sample_frame_perturbation(rng: np.random.Generator, rotate: bool = True,
                              trans: float = 0.1, scale: float = 0.1) -> FramePerturbation:
    rot = random_rotation(rng) if rotate else np.eye(3)
    tf = rng.uniform(-trans, trans, size=3)
    s = rng.uniform(1.0 - scale, 1.0 + scale)
    return FramePerturbation(rot, tf, float(s))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from SO(3) (Shoemake's subgroup algorithm)."""
    u1, u2, u3 = rng.uniform(0.0, 1.0, size=3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = np.array([a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2),
                  b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3)])
    return quat_to_matrix(q)


def quat_to_matrix(q) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues' formula."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    kx = skew(a)
    return np.eye(3) + np.sin(angle_rad) * kx + (1.0 - np.cos(angle_rad)) * kx @ kx


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return np.eye(3) + skew(w)
    return axis_angle(w / th, th)


def project_to_so3(m) -> np.ndarray:
    """Nearest rotation in Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def geodesic_angle_deg(a, b) -> float:
    c = (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Object-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])  # rows: camera axes in object frame
    return Pose(r, -r @ eye)

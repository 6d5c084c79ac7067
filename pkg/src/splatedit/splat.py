"""Pixel-aligned multi-view Gaussian splat grids.

A :class:`SplatGrid` stores one Gaussian per pixel of each of ``V`` views as a
``(V, 12, H, W)`` float32 array with the fixed channel layout::

    0:3   rgb        colour in [0, 1]
    3     depth      camera z-depth (scene units, >= 0)
    4:7   scale      per-axis standard deviation (linear, > 0)
    7:11  rotation   unit quaternion (w, x, y, z), world frame
    11    opacity    in [0, 1]

The 3D mean of a Gaussian is not stored: it follows from the depth and the
view's camera (see :func:`unproject`).
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError

NUM_CHANNELS = 12
RGB = slice(0, 3)
DEPTH = 3
SCALE = slice(4, 7)
ROTATION = slice(7, 11)
OPACITY = 11
CHANNEL_NAMES = ("r", "g", "b", "depth", "scale_x", "scale_y", "scale_z", "qw", "qx", "qy", "qz", "opacity")

QUAT_TOL = 1e-6
ORTHO_TOL = 1e-6
LOAD_RENORM_TOL = 1e-3

MAGIC = b"SPLATGRD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


# --------------------------------------------------------------------------
# rotations


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for quaternions ``(..., 4)`` in (w, x, y, z) order.

    The input is normalised first, so non-unit quaternions give proper
    rotations.
    """
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a batch of matrices (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for n, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        q = np.asarray(q)
        out[n] = q if q[0] >= 0 else -q
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out.reshape(R.shape[:-2] + (4,))


def covariance_matrix(scale, rotation) -> np.ndarray:
    """``R diag(s^2) R^T`` for batched scales ``(..., 3)`` and quaternions ``(..., 4)``."""
    R = quat_to_rotmat(rotation)
    s2 = np.asarray(scale, dtype=np.float64) ** 2
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


# --------------------------------------------------------------------------
# types


@dataclass(frozen=True, eq=False)
class GaussianAttributes:
    rgb: np.ndarray
    depth: float
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float

    def __post_init__(self):
        object.__setattr__(self, "rgb", np.asarray(self.rgb, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "depth", float(self.depth))
        object.__setattr__(self, "opacity", float(self.opacity))

    @classmethod
    def from_vector(cls, vec) -> "GaussianAttributes":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (NUM_CHANNELS,):
            raise DataError(f"expected {NUM_CHANNELS} channels, got shape {vec.shape}")
        return cls(vec[RGB], vec[DEPTH], vec[SCALE], vec[ROTATION], vec[OPACITY])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rgb, [self.depth], self.scale, self.rotation, [self.opacity]])

    def violations(self) -> list[str]:
        bad = []
        if not np.all(np.isfinite(self.as_vector())):
            bad.append("non-finite value")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            bad.append("rgb outside [0, 1]")
        if self.depth < 0:
            bad.append("negative depth")
        if np.any(self.scale <= 0):
            bad.append("non-positive scale")
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_TOL:
            bad.append("quaternion norm != 1")
        if not 0.0 <= self.opacity <= 1.0:
            bad.append("opacity outside [0, 1]")
        return bad


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera
    coordinates (x right, y down, z forward): ``x_cam = R @ x_world + t``.

    Pixel ``(u, v)`` (column, row) has its centre at ``(u + 0.5, v + 0.5)``
    in the same units as the principal point.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int | None = None) -> "Camera":
        """Same camera rendered at a different image size."""
        height = width if height is None else height
        ax, ay = width / self.width, height / self.height
        return Camera(self.fx * ax, self.fy * ay, self.cx * ax, self.cy * ay, width, height,
                      self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.array(d["rotation"]), np.array(d["translation"]))

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(focal, focal, width / 2, height / 2, width, height, R, -R @ eye)


@dataclass(frozen=True, eq=False)
class CameraRig:
    cameras: tuple

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 1:
            raise DataError("camera rig needs at least one view")
        for i, cam in enumerate(self.cameras):
            R = cam.rotation
            if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL:
                raise DataError(f"view {i}: extrinsic rotation is not orthonormal")

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(tuple(Camera.from_dict(c) for c in d["cameras"]))

    @classmethod
    def orbit(cls, num_views=4, size=16, radius=3.5, fov_deg=40.0, elevation_deg=0.0) -> "CameraRig":
        """Views evenly spaced in azimuth around the origin."""
        focal = (size / 2) / math.tan(math.radians(fov_deg) / 2)
        el = math.radians(elevation_deg)
        cams = []
        for k in range(num_views):
            az = 2 * math.pi * k / num_views
            eye = radius * np.array([math.sin(az) * math.cos(el), -math.sin(el), -math.cos(az) * math.cos(el)])
            cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), focal, size, size))
        return cls(tuple(cams))


class SplatGrid:
    """Immutable ``V x 12 x H x W`` Gaussian grid plus its camera rig."""

    __slots__ = ("_attributes", "rig")

    def __init__(self, attributes, rig: CameraRig):
        arr = np.array(attributes, dtype=np.float32, copy=True)
        if arr.ndim != 4 or arr.shape[1] != NUM_CHANNELS:
            raise DataError(f"splat grid must have shape (V, {NUM_CHANNELS}, H, W), got {arr.shape}")
        if rig.num_views != arr.shape[0]:
            raise DataError(f"rig has {rig.num_views} views but grid has {arr.shape[0]}")
        arr.setflags(write=False)
        self._attributes = arr
        self.rig = rig

    @property
    def attributes(self) -> np.ndarray:
        return self._attributes

    @property
    def shape(self) -> tuple[int, int, int]:
        V, _, H, W = self._attributes.shape
        return V, H, W

    @property
    def num_views(self) -> int:
        return self._attributes.shape[0]

    @property
    def rgb(self):
        return self._attributes[:, RGB]

    @property
    def depth(self):
        return self._attributes[:, DEPTH]

    @property
    def scale(self):
        return self._attributes[:, SCALE]

    @property
    def rotation(self):
        return self._attributes[:, ROTATION]

    @property
    def opacity(self):
        return self._attributes[:, OPACITY]

    def cell(self, view: int, row: int, col: int) -> GaussianAttributes:
        return GaussianAttributes.from_vector(self._attributes[view, :, row, col].astype(np.float64))

    def replace(self, **channels) -> "SplatGrid":
        """Copy with some channel groups replaced, e.g. ``replace(rgb=...)``."""
        slots = {"rgb": RGB, "depth": DEPTH, "scale": SCALE, "rotation": ROTATION, "opacity": OPACITY}
        arr = self._attributes.copy()
        for name, value in channels.items():
            arr[:, slots[name]] = value
        return SplatGrid(arr, self.rig)

    def __repr__(self):
        V, H, W = self.shape
        return f"SplatGrid(V={V}, H={H}, W={W})"


# --------------------------------------------------------------------------
# validation


class Violation(NamedTuple):
    view: int | None
    row: int | None
    col: int | None
    channel: str
    message: str

    def __str__(self):
        where = "grid" if self.view is None else f"cell (view={self.view}, row={self.row}, col={self.col})"
        return f"{where} [{self.channel}]: {self.message}"


def validate_grid(grid: SplatGrid) -> list[Violation]:
    """Every invariant violation in the grid; empty list means valid."""
    out: list[Violation] = []
    a = grid.attributes.astype(np.float64)
    V, H, W = grid.shape
    for i, cam in enumerate(grid.rig.cameras):
        if (cam.width, cam.height) != (W, H):
            out.append(Violation(None, None, None, "rig",
                                 f"view {i} camera is {cam.width}x{cam.height}, grid is {W}x{H}"))

    def flag(mask, channel, message):
        for v, r, c in zip(*np.nonzero(mask)):
            out.append(Violation(int(v), int(r), int(c), channel, message))

    finite = np.isfinite(a)
    for ch in range(NUM_CHANNELS):
        flag(~finite[:, ch], CHANNEL_NAMES[ch], "non-finite value")
    with np.errstate(invalid="ignore"):
        for ch in range(3):
            flag((a[:, ch] < 0) | (a[:, ch] > 1), CHANNEL_NAMES[ch], f"rgb {CHANNEL_NAMES[ch]} outside [0, 1]")
        flag(a[:, DEPTH] < 0, "depth", "negative depth")
        for ch in range(4, 7):
            flag(a[:, ch] <= 0, CHANNEL_NAMES[ch], "scale must be positive")
        qn = np.linalg.norm(a[:, ROTATION], axis=1)
        flag(np.abs(qn - 1.0) > QUAT_TOL, "rotation", "quaternion norm differs from 1")
        flag((a[:, OPACITY] < 0) | (a[:, OPACITY] > 1), "opacity", "opacity outside [0, 1]")
    return out


# --------------------------------------------------------------------------
# geometry


def pixel_rays(camera: Camera) -> np.ndarray:
    """Camera-frame ray directions with unit z for every pixel, ``(H, W, 3)``."""
    v, u = np.meshgrid(np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij")
    return np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)


def unproject(grid: SplatGrid, view: int, pixel: tuple[int, int]) -> np.ndarray:
    """World-space mean of the Gaussian at ``pixel = (u, v)`` (column, row) of ``view``."""
    V, H, W = grid.shape
    u, v = pixel
    if not (0 <= view < V and 0 <= u < W and 0 <= v < H):
        raise IndexError(f"pixel {pixel} of view {view} outside grid {V}x{H}x{W}")
    cam = grid.rig[view]
    d = float(grid.depth[view, v, u])
    x_cam = d * np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
    return cam.rotation.T @ (x_cam - cam.translation)


def unproject_grid(grid: SplatGrid) -> np.ndarray:
    """World-space means of all Gaussians, ``(V, H, W, 3)``."""
    V, H, W = grid.shape
    out = np.empty((V, H, W, 3))
    for i, cam in enumerate(grid.rig.cameras):
        x_cam = pixel_rays(cam) * grid.depth[i].astype(np.float64)[..., None]
        out[i] = (x_cam - cam.translation) @ cam.rotation
    return out


def covariance_trace(attrs: GaussianAttributes) -> float:
    """``Tr(R diag(s^2) R^T) = s_x^2 + s_y^2 + s_z^2``; rotation drops out."""
    return float(np.sum(attrs.scale ** 2))


# --------------------------------------------------------------------------
# io


def rig_path_for(path) -> Path:
    return Path(str(path) + ".rig.json")


def save_grid(grid: SplatGrid, path) -> None:
    """Write the binary grid container and its ``.rig.json`` sidecar."""
    V, H, W = grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, V, H, W))
        fh.write(grid.attributes.astype("<f4").tobytes(order="C"))
    rig_path_for(path).write_text(json.dumps(grid.rig.to_dict(), indent=1))


def load_grid(path, rig: CameraRig | None = None) -> SplatGrid:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: too short for a splat grid header")
    magic, version, V, H, W = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = V * NUM_CHANNELS * H * W * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(V, NUM_CHANNELS, H, W).astype(np.float32)

    q = arr[:, ROTATION].astype(np.float64)
    qn = np.linalg.norm(q, axis=1)
    off = np.abs(qn - 1.0) > LOAD_RENORM_TOL
    off &= qn > 0
    if np.any(off):
        warnings.warn(f"{path}: renormalising {int(off.sum())} quaternions with norm deviation > {LOAD_RENORM_TOL}")
        fixed = q / np.where(qn > 0, qn, 1.0)[:, None]
        rot = arr[:, ROTATION]
        rot[np.broadcast_to(off[:, None], rot.shape)] = fixed[np.broadcast_to(off[:, None], rot.shape)]
        arr[:, ROTATION] = rot

    if rig is None:
        side = rig_path_for(path)
        try:
            rig = CameraRig.from_dict(json.loads(side.read_text()))
        except OSError as exc:
            raise DataError(f"missing camera sidecar {side}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"corrupt camera sidecar {side}: {exc}") from exc
    return SplatGrid(arr, rig)


def export_ply(grid: SplatGrid, path) -> None:
    """Binary PLY in the usual 3DGS viewer layout (log scales, logit opacity, SH DC colour)."""
    means = unproject_grid(grid).reshape(-1, 3)
    a = grid.attributes.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, NUM_CHANNELS)
    sh_c0 = 0.28209479177387814
    op = np.clip(a[:, OPACITY], 1e-6, 1 - 1e-6)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    cols = [means[:, 0], means[:, 1], means[:, 2], *([np.zeros(len(a))] * 3),
            *((a[:, RGB] - 0.5) / sh_c0).T, np.log(op / (1 - op)),
            *np.log(np.maximum(a[:, SCALE], 1e-12)).T, *a[:, ROTATION].T]
    rec = np.empty(len(a), dtype=[(n, "<f4") for n in names])
    for n, c in zip(names, cols):
        rec[n] = c
    header = "ply\nformat binary_little_endian 1.0\nelement vertex %d\n" % len(a)
    header += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------
# demo asset


def make_demo_asset(num_views: int = 4, size: int = 16, radius: float = 1.0,
                    camera_distance: float = 3.5) -> SplatGrid:
    """Sphere of surface Gaussians with four coloured parts.

    Each pixel whose ray hits the sphere holds a flattened disc Gaussian
    tangent to the surface; background pixels hold transparent Gaussians at
    the sphere-centre depth.
    """
    rig = CameraRig.orbit(num_views, size, radius=camera_distance)
    attrs = np.zeros((num_views, NUM_CHANNELS, size, size))
    for i, cam in enumerate(rig.cameras):
        d_cam = pixel_rays(cam)
        d = d_cam @ cam.rotation  # to world, z-depth parameterised
        c = cam.center
        a = np.sum(d * d, axis=-1)
        b = 2 * d @ c
        disc = b * b - 4 * a * (c @ c - radius ** 2)
        hit = disc > 0
        lam = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), float(np.linalg.norm(c)))
        pts = c + lam[..., None] * d
        normal = pts / np.linalg.norm(pts, axis=-1, keepdims=True)

        rgb = np.empty_like(pts)
        rgb[:] = (0.2, 0.35, 0.85)
        rgb[pts[..., 0] > 0.25] = (0.2, 0.75, 0.3)
        rgb[np.abs(pts[..., 1]) < 0.2] = (0.95, 0.8, 0.15)
        rgb[pts[..., 1] < -0.55] = (0.85, 0.15, 0.1)

        footprint = 0.7 * lam / cam.fx
        tangent = np.cross(normal, np.array([0.0, 1.0, 0.0]))
        tn = np.linalg.norm(tangent, axis=-1, keepdims=True)
        tangent = np.where(tn > 1e-6, tangent / np.maximum(tn, 1e-12), np.array([1.0, 0.0, 0.0]))
        bitangent = np.cross(normal, tangent)
        frame = np.stack([tangent, bitangent, normal], axis=-1)
        quat = rotmat_to_quat(frame)

        attrs[i, RGB] = np.moveaxis(rgb, -1, 0)
        attrs[i, DEPTH] = lam
        attrs[i, 4] = footprint
        attrs[i, 5] = footprint
        attrs[i, 6] = 0.25 * footprint
        attrs[i, ROTATION] = np.moveaxis(quat, -1, 0)
        attrs[i, OPACITY] = np.where(hit, 0.95, 0.0)
    return SplatGrid(attrs, rig)


def random_grid(rng: np.random.Generator, num_views=4, size=16, opacity_range=(0.05, 0.95),
                scale_range=(0.02, 0.3), depth_range=(2.5, 4.5), rig: CameraRig | None = None) -> SplatGrid:
    """Random valid grid, mostly for tests."""
    rig = rig or CameraRig.orbit(num_views, size)
    V = rig.num_views
    a = np.empty((V, NUM_CHANNELS, size, size))
    a[:, RGB] = rng.uniform(0, 1, (V, 3, size, size))
    a[:, DEPTH] = rng.uniform(*depth_range, (V, size, size))
    a[:, SCALE] = rng.uniform(*scale_range, (V, 3, size, size))
    q = rng.normal(size=(V, 4, size, size))
    a[:, ROTATION] = q / np.linalg.norm(q, axis=1, keepdims=True)
    a[:, OPACITY] = rng.uniform(*opacity_range, (V, size, size))
    return SplatGrid(a, rig)

"""Exact geometry for yaw-only 7-DoF boxes.

Rigid transforms, pinhole projection, containment tests, and rotated 3D IoU
computed by Sutherland-Hodgman clipping of the two bird's-eye-view
rectangles. All math is float64; boxes are closed (boundary points count as
inside). Everything here is a pure function on immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Vertex merge tolerance for the polygon clipper.
_CLIP_EPS = 1e-12


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def yaw_matrix(theta: float) -> np.ndarray:
    """3x3 rotation about the vertical (z) axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Box7:
    """Oriented cuboid: center (m), sizes l/w/h (m), yaw about z (rad).

    Yaw is normalized to [-pi, pi) at construction so equal boxes have equal
    field values.
    """

    center: np.ndarray
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(center)):
            raise ValueError(f"non-finite box center {center}")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got {(self.l, self.w, self.h)}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "l", float(self.l))
        object.__setattr__(self, "w", float(self.w))
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform: x -> R @ x + t, with R a proper rotation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose()

    @staticmethod
    def from_yaw(theta: float, translation=(0.0, 0.0, 0.0)) -> "SE3Pose":
        return SE3Pose(yaw_matrix(theta), np.asarray(translation, dtype=np.float64))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a world->camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: SE3Pose = field(default_factory=SE3Pose.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")


def se3_apply(pose: SE3Pose, points: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to an (N, 3) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    return pts @ pose.rotation.T + pose.translation


def se3_compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    """Transform applying b first, then a."""
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(a: SE3Pose) -> SE3Pose:
    rt = a.rotation.T
    return SE3Pose(rt, -rt @ a.translation)


# Local corner offsets: bottom face counter-clockwise starting in the
# +x+y octant, then the top face in the same order.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, -1, +1],
        [+1, -1, +1],
    ],
    dtype=np.float64,
)


def box_corners(box: Box7) -> np.ndarray:
    """(8, 3) corners of the yaw-rotated cuboid in world coordinates."""
    half = 0.5 * np.array([box.l, box.w, box.h])
    local = _CORNER_SIGNS * half
    return local @ yaw_matrix(box.yaw).T + box.center


def _to_box_frame(box: Box7, points: np.ndarray) -> np.ndarray:
    d = np.atleast_2d(np.asarray(points, dtype=np.float64)) - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * d[:, 0] + s * d[:, 1]
    y = -s * d[:, 0] + c * d[:, 1]
    return np.stack([x, y, d[:, 2]], axis=1)


def points_in_box(box: Box7, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside the closed box (boundary inclusive)."""
    local = _to_box_frame(box, points)
    half = 0.5 * np.array([box.l, box.w, box.h])
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(box: Box7, point: np.ndarray) -> bool:
    return bool(points_in_box(box, np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


def bev_rectangle(box: Box7) -> np.ndarray:
    """(4, 2) counter-clockwise bird's-eye-view rectangle of the box."""
    return box_corners(box)[:4, :2]


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> list[np.ndarray]:
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon.

    The inside test is boundary-inclusive so identical rectangles clip to
    themselves.
    """
    output = [subject[i] for i in range(len(subject))]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        polygon, output = output, []
        s = polygon[-1]
        s_in = edge[0] * (s[1] - a[1]) - edge[1] * (s[0] - a[0]) >= -_CLIP_EPS
        for e in polygon:
            e_in = edge[0] * (e[1] - a[1]) - edge[1] * (e[0] - a[0]) >= -_CLIP_EPS
            if e_in != s_in:
                d = e - s
                den = edge[0] * d[1] - edge[1] * d[0]
                if abs(den) > 0.0:
                    t = (edge[0] * (a[1] - s[1]) - edge[1] * (a[0] - s[0])) / den
                    output.append(s + t * d)
            if e_in:
                output.append(e)
            s, s_in = e, e_in
    return output


def _merge_vertices(poly: list[np.ndarray]) -> list[np.ndarray]:
    """Drop duplicate and collinear vertices (tolerance _CLIP_EPS)."""
    dedup: list[np.ndarray] = []
    for p in poly:
        if not dedup or np.max(np.abs(p - dedup[-1])) > _CLIP_EPS:
            dedup.append(p)
    if len(dedup) > 1 and np.max(np.abs(dedup[0] - dedup[-1])) <= _CLIP_EPS:
        dedup.pop()
    if len(dedup) < 3:
        return dedup
    merged = []
    m = len(dedup)
    for i in range(m):
        prev, cur, nxt = dedup[i - 1], dedup[i], dedup[(i + 1) % m]
        cross = (cur[0] - prev[0]) * (nxt[1] - prev[1]) - (cur[1] - prev[1]) * (nxt[0] - prev[0])
        if abs(cross) > _CLIP_EPS:
            merged.append(cur)
    return merged


def _polygon_area(poly: list[np.ndarray]) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return abs(area) * 0.5


def bev_intersection_area(a: Box7, b: Box7) -> float:
    """Area of intersection of the two BEV rectangles (0 if degenerate)."""
    clipped = _clip_polygon(bev_rectangle(a), bev_rectangle(b))
    return _polygon_area(_merge_vertices(clipped))


def iou_3d(a: Box7, b: Box7) -> float:
    """Rotated 3D IoU: exact BEV polygon intersection x vertical overlap."""
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0.0:
        return 0.0
    za0, za1 = a.center[2] - 0.5 * a.h, a.center[2] + 0.5 * a.h
    zb0, zb1 = b.center[2] - 0.5 * b.h, b.center[2] + 0.5 * b.h
    overlap = min(za1, zb1) - max(za0, zb0)
    if overlap <= 0.0:
        return 0.0
    inter = inter_area * overlap
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


def project_points(cam: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection of (N, 3) world points.

    Returns (uvd, valid): uvd[i] = (u, v, depth) where valid[i]; points with
    camera-frame depth <= 1e-6 or pixels outside [0, width) x [0, height)
    are culled (valid[i] False, row zeroed).
    """
    cam_pts = se3_apply(cam.extrinsic, points)
    z = cam_pts[:, 2]
    valid = z > 1e-6
    uvd = np.zeros((len(cam_pts), 3))
    safe_z = np.where(valid, z, 1.0)
    u = cam.fx * cam_pts[:, 0] / safe_z + cam.cx
    v = cam.fy * cam_pts[:, 1] / safe_z + cam.cy
    valid &= (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    uvd[valid, 0] = u[valid]
    uvd[valid, 1] = v[valid]
    uvd[valid, 2] = z[valid]
    return uvd, valid


def project_box_to_2d(cam: CameraModel, box: Box7) -> tuple[float, float, float, float] | None:
    """Axis-aligned image bounds of the projected box corners.

    Returns (umin, vmin, umax, vmax) over the non-culled corners, clamped to
    the image, or None when every corner is culled.
    """
    uvd, valid = project_points(cam, box_corners(box))
    if not np.any(valid):
        return None
    u, v = uvd[valid, 0], uvd[valid, 1]
    return (
        float(np.clip(u.min(), 0.0, cam.width)),
        float(np.clip(v.min(), 0.0, cam.height)),
        float(np.clip(u.max(), 0.0, cam.width)),
        float(np.clip(v.max(), 0.0, cam.height)),
    )


def in_annotation_range(box: Box7, limit: float) -> bool:
    """True iff the center's horizontal distance from the origin is <= limit."""
    if limit <= 0:
        raise ValueError("annotation range limit must be positive")
    return bool(math.hypot(box.center[0], box.center[1]) <= limit)

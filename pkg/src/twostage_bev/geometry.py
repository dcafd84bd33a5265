"""Rigid transforms, pinhole cameras, oriented boxes and their overlaps.

Frames: the ego frame is x forward, y left, z up with the origin on the
ground.  Camera frames are x right, y down, z along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

Z_MIN = 1e-3
_ORTHO_TOL = 1e-9
_MIN_AREA = 1e-12


class GeometryError(ValueError):
    pass


def normalize_angle(a):
    """Wrap to (-pi, pi]."""
    out = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return float(out) if np.ndim(out) == 0 else out


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def validate(self) -> "SE3":
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        return self

    @classmethod
    def identity(cls) -> "SE3":
        return cls()

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "SE3":
        return cls(rot_z(yaw), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, m) -> "SE3":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3]).validate()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SE3":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def se3_apply(T: SE3, p) -> np.ndarray:
    """Apply to one point [3] or a batch [N,3]."""
    p = np.asarray(p, dtype=float)
    return p @ T.rotation.T + T.translation


def se3_compose(A: SE3, B: SE3) -> SE3:
    """A after B: x -> A(B(x))."""
    A.validate()
    B.validate()
    return SE3(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def se3_inverse(T: SE3) -> SE3:
    T.validate()
    Rt = T.rotation.T
    return SE3(Rt, -Rt @ T.translation)


# -- cameras -------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics.  ``flipped`` marks a horizontally mirrored image;
    its principal point is stored already mirrored (width - 1 - cx)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    flipped: bool = False

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def mirrored(self) -> "CameraIntrinsics":
        return replace(self, cx=self.width - 1 - self.cx, flipped=not self.flipped)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "flipped": self.flipped}


def project_points(p_cam, K: CameraIntrinsics):
    """Vectorised pinhole projection; returns (uv [N,2], valid [N])."""
    p = np.atleast_2d(np.asarray(p_cam, dtype=float))
    z = p[:, 2]
    safe = np.where(z > Z_MIN, z, 1.0)
    sx = -K.fx if K.flipped else K.fx
    u = sx * p[:, 0] / safe + K.cx
    v = K.fy * p[:, 1] / safe + K.cy
    inside = (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
    valid = (z > Z_MIN) & inside
    return np.stack([u, v], axis=1), valid


def project(p_cam, K: CameraIntrinsics):
    """Project one camera-frame point; returns (u, v, valid)."""
    uv, valid = project_points(p_cam, K)
    return float(uv[0, 0]), float(uv[0, 1]), bool(valid[0])


def unproject(uv, depth, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel(s) at the given z-depth into the camera frame."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    depth = np.asarray(depth, dtype=float).reshape(-1)
    sx = -K.fx if K.flipped else K.fx
    x = (uv[:, 0] - K.cx) * depth / sx
    y = (uv[:, 1] - K.cy) * depth / K.fy
    return np.stack([x, y, depth], axis=1)


@dataclass(frozen=True, eq=False)
class CameraRig:
    intrinsics: tuple
    ego_to_camera: tuple
    names: tuple

    def __post_init__(self):
        n = len(self.intrinsics)
        if n < 1 or len(self.ego_to_camera) != n or len(self.names) != n:
            raise GeometryError("rig needs >= 1 view with matching intrinsics/extrinsics/names")
        if len(set(self.names)) != n:
            raise GeometryError("view identifiers must be unique")

    @property
    def num_views(self) -> int:
        return len(self.intrinsics)

    def view(self, i: int):
        return self.intrinsics[i], self.ego_to_camera[i]

    def permuted(self, order) -> "CameraRig":
        return CameraRig(tuple(self.intrinsics[i] for i in order),
                         tuple(self.ego_to_camera[i] for i in order),
                         tuple(self.names[i] for i in order))

    def with_intrinsics(self, intrinsics) -> "CameraRig":
        return CameraRig(tuple(intrinsics), self.ego_to_camera, self.names)

    def to_dict(self) -> dict:
        return {"names": list(self.names),
                "intrinsics": [k.to_dict() for k in self.intrinsics],
                "ego_to_camera": [t.to_dict() for t in self.ego_to_camera]}

    @classmethod
    def from_dict(cls, d) -> "CameraRig":
        return cls(tuple(CameraIntrinsics(**k) for k in d["intrinsics"]),
                   tuple(SE3.from_dict(t) for t in d["ego_to_camera"]),
                   tuple(d["names"]))


def camera_extrinsic(yaw: float, position=(0.0, 0.0, 1.6)) -> SE3:
    """Ego->camera transform for a level camera looking along ``yaw``."""
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[s, -c, 0.0],     # camera x (right)
                  [0.0, 0.0, -1.0],  # camera y (down)
                  [c, s, 0.0]])      # camera z (forward)
    return SE3(R, -R @ np.asarray(position, dtype=float))


def default_rig(width: int = 128, height: int = 128, num_views: int = 6,
                hfov_deg: float = 90.0, mount_height: float = 1.6) -> CameraRig:
    f = (width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
    K = CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    yaws = [2 * np.pi * i / num_views for i in range(num_views)]
    return CameraRig(tuple(K for _ in yaws),
                     tuple(camera_extrinsic(y, (0.0, 0.0, mount_height)) for y in yaws),
                     tuple(f"cam{i}" for i in range(num_views)))


# -- boxes ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    size: np.ndarray  # (l, w, h)
    yaw: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def is_valid(self) -> bool:
        return bool(np.all(self.size > 0) and 0.0 <= self.score <= 1.0)

    def replace(self, **kw) -> "Box3D":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(), "yaw": self.yaw,
                "velocity": self.velocity.tolist(), "class_id": self.class_id, "score": self.score}

    @classmethod
    def from_dict(cls, d) -> "Box3D":
        return cls(**d)


def box_corners_3d(b: Box3D) -> np.ndarray:
    """8 corners [8,3]; first four on the bottom face."""
    l, w, h = b.size / 2.0
    local = np.array([[sx * l, sy * w, sz * h]
                      for sz in (-1, 1) for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))])
    return local @ rot_z(b.yaw).T + b.center


def bev_footprint(b: Box3D) -> np.ndarray:
    """Counter-clockwise footprint polygon [4,2]."""
    l, w = b.size[0] / 2.0, b.size[1] / 2.0
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
    c, s = np.cos(b.yaw), np.sin(b.yaw)
    R = np.array([[c, -s], [s, c]])
    return local @ R.T + b.center[:2]


def transform_box(b: Box3D, T: SE3) -> Box3D:
    """Move a box by a yaw-only rigid transform."""
    yaw = np.arctan2(T.rotation[1, 0], T.rotation[0, 0])
    vel = T.rotation[:2, :2] @ b.velocity
    return b.replace(center=se3_apply(T, b.center), yaw=b.yaw + yaw, velocity=vel)


def iou_2d(a, b) -> float:
    """IoU of axis-aligned rects (x1, y1, x2, y2)."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by convex CCW polygon ``clip``."""
    out = [p for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp = out
        out = []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    out.append(prev + (cur - prev) * (sp / (sp - sc)))
                out.append(cur)
            elif sp >= 0:
                out.append(prev + (cur - prev) * (sp / (sp - sc)))
    return np.array(out) if out else np.zeros((0, 2))


def iou_bev(a: Box3D, b: Box3D) -> float:
    pa, pb = bev_footprint(a), bev_footprint(b)
    area_a, area_b = polygon_area(pa), polygon_area(pb)
    if area_a <= _MIN_AREA or area_b <= _MIN_AREA:
        return 0.0
    inter = max(0.0, polygon_area(clip_polygon(pa, pb)))
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def iou_3d_aligned(size_a, size_b) -> float:
    """IoU of two boxes sharing center and orientation (scale error metric)."""
    inter = np.prod(np.minimum(size_a, size_b))
    return float(inter / (np.prod(size_a) + np.prod(size_b) - inter))


def clip_near_plane(poly: np.ndarray, z_clip: float = 0.05) -> np.ndarray:
    """Clip a camera-frame polygon [n,3] to z >= z_clip."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, prev = poly[i], poly[i - 1]
        cin, pin = cur[2] >= z_clip, prev[2] >= z_clip
        if cin != pin:
            t = (z_clip - prev[2]) / (cur[2] - prev[2])
            out.append(prev + t * (cur - prev))
        if cin:
            out.append(cur)
    return np.array(out) if out else np.zeros((0, 3))


_BOX_FACES = ((4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (3, 0, 4, 7), (0, 3, 2, 1))


def box_image_rect(corners_cam: np.ndarray, K: CameraIntrinsics):
    """Axis-aligned hull (x1, y1, x2, y2) of a box's projection, clipped to
    the image; None when nothing of the box lands in front of the camera."""
    pts = []
    for face in _BOX_FACES:
        poly = clip_near_plane(corners_cam[list(face)])
        if len(poly):
            pts.append(poly)
    if not pts:
        return None
    uv, _ = project_points(np.vstack(pts), K)
    x1 = max(float(uv[:, 0].min()), -0.5)
    y1 = max(float(uv[:, 1].min()), -0.5)
    x2 = min(float(uv[:, 0].max()), K.width - 0.5)
    y2 = min(float(uv[:, 1].max()), K.height - 0.5)
    if x2 <= x1 or y2 <= y1:
        return None
    return (x1, y1, x2, y2)

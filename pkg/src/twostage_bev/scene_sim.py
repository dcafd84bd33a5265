"""Deterministic synthetic surround-camera driving scenes.

Objects are boxes moving with constant velocity plus a little jitter; the
ego vehicle drives a smooth arc.  Each view is rendered as filled, shaded
box faces (far to near) over a smooth noise texture, with a class-coded
colour per box so appearance, apparent size and position carry the signal
a detector needs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (SE3, Box3D, CameraRig, box_corners_3d, clip_near_plane, default_rig,
                       project_points, rot_z, se3_apply, se3_compose, se3_inverse)

CLASS_NAMES = ("car", "van", "post")
CANONICAL_SIZES = np.array([[4.0, 1.8, 1.5],
                            [6.0, 2.4, 2.6],
                            [1.0, 1.0, 1.4]])
CLASS_COLORS = np.array([[0.95, 0.15, 0.10],
                         [0.10, 0.85, 0.20],
                         [0.15, 0.30, 1.00]])

# face index quadruples into box_corners_3d output, with a shade factor
_FACES = (((4, 5, 6, 7), 1.0),   # top
          ((0, 1, 5, 4), 0.8),   # front (+x)
          ((2, 3, 7, 6), 0.6),   # back
          ((1, 2, 6, 5), 0.7),   # right (-y)
          ((3, 0, 4, 7), 0.9),   # left (+y)
          ((0, 3, 2, 1), 0.5))   # bottom


class SceneFormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    num_sequences: int = 2
    frames_per_sequence: int = 4
    frame_interval: float = 0.5
    min_objects: int = 2
    max_objects: int = 5
    num_classes: int = 3
    bev_range: float = 25.0
    min_distance: float = 4.0
    image_width: int = 128
    image_height: int = 128
    num_views: int = 6
    ego_speed: float = 3.0
    ego_yaw_rate: float = 0.05
    object_speed: float = 2.0
    position_noise: float = 0.02
    seed: int = 0

    def validate(self) -> "SceneConfig":
        if self.num_sequences < 1 or self.frames_per_sequence < 1 or self.num_views < 1:
            raise ValueError("sequence, frame and view counts must be >= 1")
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be positive")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.min_distance >= self.bev_range:
            raise ValueError("min_distance must be inside the BEV range")
        return self


@dataclass(eq=False)
class SceneFrame:
    timestamp: float
    ego_pose: SE3  # world <- ego
    rig: CameraRig
    images: np.ndarray  # [N,3,H,W] float32
    gt_boxes: list = field(default_factory=list)
    gt_visibility: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    gt_ids: list = field(default_factory=list)
    sequence_id: int = 0
    frame_index: int = 0


def relative_pose(current: SceneFrame, other: SceneFrame) -> SE3:
    """Transform taking ``other``'s ego coordinates into ``current``'s."""
    return se3_compose(se3_inverse(current.ego_pose), other.ego_pose)


# -- generation -----------------------------------------------------------

def _ego_pose(t: float, cfg: SceneConfig, yaw0: float) -> SE3:
    w, v = cfg.ego_yaw_rate, cfg.ego_speed
    yaw = yaw0 + w * t
    if abs(w) < 1e-12:
        x, y = v * t * np.cos(yaw0), v * t * np.sin(yaw0)
    else:
        x = v / w * (np.sin(yaw) - np.sin(yaw0))
        y = -v / w * (np.cos(yaw) - np.cos(yaw0))
    return SE3(rot_z(yaw), np.array([x, y, 0.0]))


def _noise_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth multi-octave value noise in [0,1], shape [H,W]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for cells in (4, 8, 16):
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h)
        xs = np.linspace(0, cells, w)
        y0 = np.minimum(ys.astype(int), cells - 1)
        x0 = np.minimum(xs.astype(int), cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        fy = fy * fy * (3 - 2 * fy)
        fx = fx * fx * (3 - 2 * fx)
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        out += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy)
        total += amp
        amp *= 0.5
    return out / total


def _fill_convex(img: np.ndarray, poly: np.ndarray, color: np.ndarray) -> None:
    """Paint pixels whose centres fall inside convex polygon [n,2] (u,v)."""
    H, W = img.shape[1:]
    if len(poly) < 3:
        return
    u0 = max(int(np.floor(poly[:, 0].min())), 0)
    u1 = min(int(np.ceil(poly[:, 0].max())), W - 1)
    v0 = max(int(np.floor(poly[:, 1].min())), 0)
    v1 = min(int(np.ceil(poly[:, 1].max())), H - 1)
    if u0 > u1 or v0 > v1:
        return
    us, vs = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    area = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    sign = 1.0 if area >= 0 else -1.0
    inside = np.ones(us.shape, dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cross = (b[0] - a[0]) * (vs - a[1]) - (b[1] - a[1]) * (us - a[0])
        inside &= sign * cross >= 0
    region = img[:, v0:v1 + 1, u0:u1 + 1]
    region[:, inside] = color[:, None]


def box_visibility(box: Box3D, rig: CameraRig) -> np.ndarray:
    corners = box_corners_3d(box)
    vis = np.zeros(rig.num_views, dtype=bool)
    for i in range(rig.num_views):
        K, T = rig.view(i)
        _, valid = project_points(se3_apply(T, corners), K)
        vis[i] = bool(valid.any())
    return vis


def render_view(boxes, K, T: SE3, background: np.ndarray) -> np.ndarray:
    """Render one camera image [3,H,W]; ``background`` is [3,H,W]."""
    img = background.copy()
    cam_boxes = []
    for b in boxes:
        corners = se3_apply(T, box_corners_3d(b))
        cam_boxes.append((float(np.linalg.norm(se3_apply(T, b.center))), b, corners))
    cam_boxes.sort(key=lambda item: -item[0])
    for _, b, corners in cam_boxes:
        if (corners[:, 2] < 0.05).all():
            continue
        base = CLASS_COLORS[b.class_id % len(CLASS_COLORS)]
        faces = []
        for idx, shade in _FACES:
            poly3 = clip_near_plane(corners[list(idx)])
            if len(poly3) < 3:
                continue
            depth = float(np.linalg.norm(poly3.mean(axis=0)))
            faces.append((depth, poly3, shade))
        faces.sort(key=lambda f: -f[0])
        for _, poly3, shade in faces:
            uv, _ = project_points(poly3, K)
            _fill_convex(img, uv, base * shade)
    return img


def _background(rng, cfg: SceneConfig, K) -> np.ndarray:
    H, W = cfg.image_height, cfg.image_width
    tex = _noise_texture(rng, H, W)
    rows = np.arange(H)[:, None]
    ground = (rows > K.cy).astype(float)
    base = 0.25 + 0.15 * ground
    bg = np.stack([base + 0.2 * tex, base + 0.2 * tex, base + 0.25 * tex - 0.05 * ground])
    return bg


def _render_frame(boxes, rig: CameraRig, rng, cfg: SceneConfig) -> np.ndarray:
    imgs = []
    for i in range(rig.num_views):
        K, T = rig.view(i)
        imgs.append(render_view(boxes, K, T, _background(rng, cfg, K)))
    return np.stack(imgs).astype(np.float32)


def generate_sequence(cfg: SceneConfig, seq_id: int, rig: CameraRig | None = None) -> list[SceneFrame]:
    rng = np.random.default_rng([cfg.seed, seq_id])
    rig = rig or default_rig(cfg.image_width, cfg.image_height, cfg.num_views)
    yaw0 = rng.uniform(-np.pi, np.pi)
    start = _ego_pose(0.0, cfg, yaw0)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    placed = []
    for oid in range(n_obj):
        cls = int(rng.integers(0, cfg.num_classes))
        for _ in range(100):
            r = rng.uniform(cfg.min_distance, 0.75 * cfg.bev_range)
            th = rng.uniform(-np.pi, np.pi)
            xy = np.array([r * np.cos(th), r * np.sin(th)])
            if all(np.linalg.norm(xy - p) > 4.0 for p in placed):
                break
        placed.append(xy)
        size = CANONICAL_SIZES[cls] * rng.uniform(0.9, 1.1, size=3)
        heading = rng.uniform(-np.pi, np.pi)
        speed = 0.0 if cls == 2 else rng.uniform(0.0, cfg.object_speed)
        ego_center = np.array([xy[0], xy[1], size[2] / 2.0])
        world_center = se3_apply(start, ego_center)
        world_yaw = heading + start.yaw
        vel = speed * np.array([np.cos(world_yaw), np.sin(world_yaw)])
        objects.append(dict(id=oid, cls=cls, size=size, center0=world_center, yaw=world_yaw, vel=vel))

    frames = []
    for k in range(cfg.frames_per_sequence):
        t = k * cfg.frame_interval
        pose = _ego_pose(t, cfg, yaw0)
        inv = se3_inverse(pose)
        boxes, ids = [], []
        for ob in objects:
            jitter = rng.normal(0.0, cfg.position_noise, size=2) if cfg.position_noise > 0 else np.zeros(2)
            wc = ob["center0"] + np.array([*(ob["vel"] * t + jitter), 0.0])
            c = se3_apply(inv, wc)
            if np.abs(c[:2]).max() >= cfg.bev_range:
                continue
            vel_ego = inv.rotation[:2, :2] @ ob["vel"]
            boxes.append(Box3D(center=c, size=ob["size"], yaw=ob["yaw"] - pose.yaw,
                               velocity=vel_ego, class_id=ob["cls"]))
            ids.append(ob["id"])
        images = _render_frame(boxes, rig, rng, cfg)
        vis = (np.stack([box_visibility(b, rig) for b in boxes]) if boxes
               else np.zeros((0, rig.num_views), dtype=bool))
        frames.append(SceneFrame(timestamp=t, ego_pose=pose, rig=rig, images=images,
                                 gt_boxes=boxes, gt_visibility=vis, gt_ids=ids,
                                 sequence_id=seq_id, frame_index=k))
    return frames


def generate(cfg: SceneConfig) -> list[list[SceneFrame]]:
    cfg.validate()
    return [generate_sequence(cfg, s) for s in range(cfg.num_sequences)]


# -- image-level augmentation --------------------------------------------

def ida_flip(frame: SceneFrame, apply) -> SceneFrame:
    """Mirror the selected views horizontally.

    ``apply`` is a bool or one bool per view.  The 3D ground truth is left
    untouched; the mirrored intrinsics keep projections consistent.
    """
    n = frame.rig.num_views
    mask = np.broadcast_to(np.asarray(apply, dtype=bool), (n,))
    images = frame.images.copy()
    intr = list(frame.rig.intrinsics)
    for i in np.flatnonzero(mask):
        images[i] = frame.images[i][:, :, ::-1]
        intr[i] = intr[i].mirrored()
    return SceneFrame(timestamp=frame.timestamp, ego_pose=frame.ego_pose,
                      rig=frame.rig.with_intrinsics(intr), images=images,
                      gt_boxes=list(frame.gt_boxes), gt_visibility=frame.gt_visibility.copy(),
                      gt_ids=list(frame.gt_ids), sequence_id=frame.sequence_id,
                      frame_index=frame.frame_index)


# -- serialization -------------------------------------------------------

MANIFEST = "manifest.jsonl"


def _frame_record(fr: SceneFrame, blob: str) -> dict:
    return {
        "sequence_id": fr.sequence_id, "frame_index": fr.frame_index, "timestamp": fr.timestamp,
        "ego_pose": fr.ego_pose.to_dict(), "rig": fr.rig.to_dict(),
        "gt_boxes": [b.to_dict() for b in fr.gt_boxes], "gt_ids": list(fr.gt_ids),
        "gt_visibility": fr.gt_visibility.astype(int).tolist(),
        "images": {"path": blob, "shape": list(fr.images.shape), "dtype": "<f4"},
    }


def serialize(frames, path) -> None:
    """Write frames (flat list or list of sequences) to directory ``path``."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    flat = [f for seq in frames for f in seq] if frames and isinstance(frames[0], list) else list(frames)
    with open(root / MANIFEST, "w") as fh:
        for fr in flat:
            blob = f"images/s{fr.sequence_id:03d}_f{fr.frame_index:04d}.f32"
            (root / blob).write_bytes(np.ascontiguousarray(fr.images, dtype="<f4").tobytes())
            fh.write(json.dumps(_frame_record(fr, blob)) + "\n")


def deserialize(path) -> list[SceneFrame]:
    root = Path(path)
    raw = (root / MANIFEST).read_bytes()
    frames = []
    offset = 0
    for line in raw.splitlines(keepends=True):
        start = offset
        offset += len(line)
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(f"{MANIFEST}: malformed record at byte offset {start + exc.pos}") from None
        if not line.endswith(b"\n"):
            raise SceneFormatError(f"{MANIFEST}: truncated record at byte offset {start + len(line)}")
        meta = rec["images"]
        shape = tuple(meta["shape"])
        blob = (root / meta["path"]).read_bytes()
        need = 4 * int(np.prod(shape))
        if len(blob) != need:
            raise SceneFormatError(f"{meta['path']}: truncated image blob at byte offset {len(blob)} "
                                   f"(expected {need} bytes)")
        images = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        boxes = [Box3D.from_dict(b) for b in rec["gt_boxes"]]
        vis = np.array(rec["gt_visibility"], dtype=bool).reshape(len(boxes), len(rec["rig"]["names"]))
        frames.append(SceneFrame(timestamp=rec["timestamp"], ego_pose=SE3.from_dict(rec["ego_pose"]),
                                 rig=CameraRig.from_dict(rec["rig"]), images=images, gt_boxes=boxes,
                                 gt_visibility=vis, gt_ids=rec["gt_ids"],
                                 sequence_id=rec["sequence_id"], frame_index=rec["frame_index"]))
    return frames


def group_sequences(frames) -> list[list[SceneFrame]]:
    seqs: dict[int, list] = {}
    for f in frames:
        seqs.setdefault(f.sequence_id, []).append(f)
    return [sorted(v, key=lambda f: f.frame_index) for _, v in sorted(seqs.items())]


def config_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)

"""Dense per-pixel monocular 3D detection head (FCOS-style assignment).

Per location the head predicts class logits, 2D side distances, 2D
centre-ness, and a 3D box: depth, offset to the projected 3D centre, size
deviation from the class canonical size, allocentric yaw as (sin, cos) and
a 3D confidence.

Horizontally flipped views are handled in an "apparent" camera frame (the
true camera frame mirrored in x) so the head always sees an ordinary
pinhole camera.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import DiffTensor
from .backbone import STRIDES, FeaturePyramid
from .geometry import (Box3D, CameraIntrinsics, SE3, Z_MIN, box_corners_3d, box_image_rect,
                       normalize_angle, se3_apply)
from .scene_sim import CANONICAL_SIZES

REG_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, 256.0), (256.0, 512.0), (512.0, np.inf))
F_REF = 64.0
# box channel layout
LTRB, CTR, DEPTH, OFFSET, SIZE, YAW, CONF = (slice(0, 4), 4, 5, slice(6, 8), slice(8, 11),
                                           slice(11, 13), 13)
NUM_BOX_CHANNELS = 14
# raw 3D target layout: depth, off_u, off_v, size_dev x3, sin, cos
RAW_DEPTH, RAW_OFF, RAW_SIZE, RAW_YAW = 0, slice(1, 3), slice(3, 6), slice(6, 8)
CORNER_SIGNS = np.array([[sx, sy, sz] for sz in (-1, 1)
                         for sx, sy in ((1, 1), (1, -1), (-1, -1), (-1, 1))], dtype=float) / 2.0


class LossError(FloatingPointError):
    pass


@dataclass
class HeadConfig:
    num_classes: int = 3
    f_ref: float = F_REF
    depth_init: float = 10.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    center_radius: float = 1.5
    conf_temperature: float = 1.0
    tower_convs: int = 1


# -- locations -------------------------------------------------------------

@dataclass
class Locations:
    """Flattened feature locations over all pyramid levels."""

    uv: np.ndarray      # [L,2] pixel coordinates (u, v)
    stride: np.ndarray  # [L]
    level: np.ndarray   # [L]
    shapes: list

    def __len__(self):
        return len(self.stride)


def make_locations(shapes, strides=STRIDES) -> Locations:
    uv, st, lv = [], [], []
    for li, ((h, w), s) in enumerate(zip(shapes, strides)):
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        u = jj.reshape(-1) * s + (s - 1) / 2.0
        v = ii.reshape(-1) * s + (s - 1) / 2.0
        uv.append(np.stack([u, v], axis=1))
        st.append(np.full(h * w, float(s)))
        lv.append(np.full(h * w, li))
    return Locations(np.concatenate(uv), np.concatenate(st), np.concatenate(lv), list(shapes))


# -- prediction container ---------------------------------------------------

@dataclass
class PerspectivePrediction:
    """Per-level raw outputs batched over views.

    ``cls[l]`` is [N,K,h,w]; ``box[l]`` is [N,14,h,w] with channels
    ltrb(4) centerness(1) depth(1) center_offset(2) size_dev(3) yaw(2) conf3d(1).
    """

    cls: list
    box: list

    def flat(self):
        """Concatenate levels: (cls [N,L,K], box [N,L,14])."""
        def merge(maps):
            parts = [m.reshape(m.shape[0], m.shape[1], -1) for m in maps]
            return ops.concat(parts, axis=2).transpose(0, 2, 1)
        return merge(self.cls), merge(self.box)

    def shapes(self):
        return [tuple(m.shape[-2:]) for m in self.cls]

    @classmethod
    def from_flat(cls, cls_flat, box_flat, shapes) -> "PerspectivePrediction":
        """Split flat [N,L,C] tensors back into per-level [N,C,h,w] maps."""
        def split(t):
            out, start = [], 0
            for h, w in shapes:
                part = t[:, start:start + h * w, :].transpose(0, 2, 1)
                out.append(part.reshape(t.shape[0], t.shape[2], h, w))
                start += h * w
            return out
        return cls(split(ops.as_tensor(cls_flat)), split(ops.as_tensor(box_flat)))

    def level_fields(self, level: int) -> dict:
        b = self.box[level]
        return {"class_logits": self.cls[level], "box2d_offsets": b[:, LTRB], "centerness": b[:, CTR:CTR + 1],
                "depth": b[:, DEPTH:DEPTH + 1], "center_offset": b[:, OFFSET], "size_dev": b[:, SIZE],
                "yaw_enc": b[:, YAW], "conf3d": b[:, CONF:CONF + 1]}


class PerspectiveHead(Module):
    def __init__(self, rng: np.random.Generator, channels: int, cfg: HeadConfig):
        self.cfg = cfg
        self.cls_tower = [Conv2d(rng, channels, channels, 3) for _ in range(cfg.tower_convs)]
        self.box_tower = [Conv2d(rng, channels, channels, 3) for _ in range(cfg.tower_convs)]
        self.cls_out = Conv2d(rng, channels, cfg.num_classes, 3)
        self.box_out = Conv2d(rng, channels, NUM_BOX_CHANNELS, 3)
        self.cls_out.weight.data *= 0.1
        self.cls_out.bias.data[:] = -np.log((1 - 0.01) / 0.01)
        self.box_out.weight.data *= 0.1
        self.box_out.bias.data[LTRB] = np.log(2.0)
        self.box_out.bias.data[DEPTH] = np.log(cfg.depth_init)
        self.box_out.bias.data[YAW.start + 1] = 1.0

    def __call__(self, pyramid: FeaturePyramid) -> PerspectivePrediction:
        cls_maps, box_maps = [], []
        for feat in pyramid.levels:
            c = feat
            for conv in self.cls_tower:
                c = conv(c).relu()
            b = feat
            for conv in self.box_tower:
                b = conv(b).relu()
            cls_maps.append(self.cls_out(c))
            box_maps.append(self.box_out(b))
        return PerspectivePrediction(cls_maps, box_maps)


# -- camera frames -----------------------------------------------------------

def apparent_intrinsics(K: CameraIntrinsics) -> CameraIntrinsics:
    return replace(K, flipped=False) if K.flipped else K


def to_apparent(p_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    if not K.flipped:
        return p_cam
    p = np.array(p_cam, dtype=float, copy=True)
    p[..., 0] *= -1
    return p


def camera_yaw(heading_cam: np.ndarray) -> float:
    """Heading angle in the camera x-z plane, atan2(d_z, d_x)."""
    return float(np.arctan2(heading_cam[2], heading_cam[0]))


def ego_box_to_camera(box: Box3D, T: SE3) -> Box3D:
    """Box in a camera frame; its ``yaw`` is the camera-plane heading angle."""
    heading = T.rotation @ np.array([np.cos(box.yaw), np.sin(box.yaw), 0.0])
    return box.replace(center=se3_apply(T, box.center), yaw=camera_yaw(heading))


def camera_box_to_ego(box: Box3D, T: SE3) -> Box3D:
    heading_cam = np.array([np.cos(box.yaw), 0.0, np.sin(box.yaw)])
    heading = T.rotation.T @ heading_cam
    center = T.rotation.T @ (box.center - T.translation)
    return box.replace(center=center, yaw=float(np.arctan2(heading[1], heading[0])))


def camera_box_corners(center, size, theta) -> np.ndarray:
    """Corners [8,3] of a camera-frame box (vertical = camera y)."""
    d = np.array([np.cos(theta), 0.0, np.sin(theta)])
    lat = np.array([-np.sin(theta), 0.0, np.cos(theta)])
    up = np.array([0.0, 1.0, 0.0])
    S = CORNER_SIGNS * np.asarray(size)[[0, 1, 2]]
    return center + S[:, 0:1] * d + S[:, 1:2] * lat + S[:, 2:3] * up


# -- encoding / decoding ------------------------------------------------------

def encode_raw3d(center_app, size, theta_app, class_id, loc_uv, stride, K: CameraIntrinsics,
                 f_ref: float = F_REF) -> np.ndarray:
    """Raw 3D regression values for a box seen in the apparent camera frame."""
    Ka = apparent_intrinsics(K)
    x, y, z = center_app
    uc = Ka.fx * x / z + Ka.cx
    vc = Ka.fy * y / z + Ka.cy
    alpha = theta_app + np.arctan2(x, z)
    raw = np.empty(8)
    raw[RAW_DEPTH] = np.log(z * f_ref / Ka.fx)
    raw[RAW_OFF] = [(uc - loc_uv[0]) / stride, (vc - loc_uv[1]) / stride]
    raw[RAW_SIZE] = np.log(np.asarray(size) / CANONICAL_SIZES[class_id])
    raw[RAW_YAW] = [np.sin(alpha), np.cos(alpha)]
    return raw


def decode_raw3d(raw, class_id, loc_uv, stride, K: CameraIntrinsics, f_ref: float = F_REF):
    """Inverse of :func:`encode_raw3d`: (center_app, size, theta_app)."""
    Ka = apparent_intrinsics(K)
    z = np.exp(raw[RAW_DEPTH]) * Ka.fx / f_ref
    uc = loc_uv[0] + raw[1] * stride
    vc = loc_uv[1] + raw[2] * stride
    center = np.array([(uc - Ka.cx) * z / Ka.fx, (vc - Ka.cy) * z / Ka.fy, z])
    size = CANONICAL_SIZES[class_id] * np.exp(raw[RAW_SIZE])
    alpha = np.arctan2(raw[6], raw[7])
    theta = alpha - np.arctan2(center[0], center[2])
    return center, size, float(normalize_angle(theta))


def apparent_to_camera_box(center_app, size, theta_app, K: CameraIntrinsics, class_id=0, score=1.0) -> Box3D:
    if K.flipped:
        center = np.array([-center_app[0], center_app[1], center_app[2]])
        theta = np.pi - theta_app
    else:
        center, theta = np.asarray(center_app, dtype=float), theta_app
    return Box3D(center=center, size=size, yaw=theta, class_id=class_id, score=score)


# -- target assignment --------------------------------------------------------

@dataclass
class PerspectiveTargets:
    """Flattened per-location targets for one view (layout of :class:`Locations`)."""

    labels: np.ndarray       # [L] class id, -1 background
    gt_index: np.ndarray     # [L] index into gt list, -1 background
    ltrb: np.ndarray         # [L,4] pixels
    centerness: np.ndarray   # [L]
    raw3d: np.ndarray        # [L,8]

    @property
    def foreground(self) -> np.ndarray:
        return self.labels >= 0

    @classmethod
    def empty(cls, n: int) -> "PerspectiveTargets":
        return cls(np.full(n, -1), np.full(n, -1), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 8)))


def _project_gt(gt_boxes, T: SE3, K: CameraIntrinsics):
    """Per gt: (rect, projected centre uv, apparent centre, apparent theta) or None."""
    Ka = apparent_intrinsics(K)
    out = []
    for b in gt_boxes:
        cam = ego_box_to_camera(b, T)
        corners = to_apparent(se3_apply(T, box_corners_3d(b)), K)
        center = to_apparent(cam.center, K)
        if center[2] <= Z_MIN:
            out.append(None)
            continue
        rect = box_image_rect(corners, Ka)
        if rect is None:
            out.append(None)
            continue
        heading = np.array([np.cos(cam.yaw), 0.0, np.sin(cam.yaw)])
        heading = to_apparent(heading, K)
        uc = Ka.fx * center[0] / center[2] + Ka.cx
        vc = Ka.fy * center[1] / center[2] + Ka.cy
        out.append((rect, np.array([uc, vc]), center, camera_yaw(heading)))
    return out


def assign_targets(locs: Locations, gt_boxes, T: SE3, K: CameraIntrinsics,
                   cfg: HeadConfig | None = None, ranges=REG_RANGES) -> PerspectiveTargets:
    """FCOS assignment with centre sampling around the projected 3D centre."""
    cfg = cfg or HeadConfig()
    n = len(locs)
    tg = PerspectiveTargets.empty(n)
    proj = _project_gt(gt_boxes, T, K)
    keep = [i for i, p in enumerate(proj) if p is not None]
    if not keep:
        return tg
    rects = np.array([proj[i][0] for i in keep])
    centers = np.array([proj[i][1] for i in keep])
    u, v = locs.uv[:, 0:1], locs.uv[:, 1:2]
    l = u - rects[None, :, 0]
    t = v - rects[None, :, 1]
    r = rects[None, :, 2] - u
    b = rects[None, :, 3] - v
    ltrb = np.stack([l, t, r, b], axis=2)  # [L,G,4]
    inside = ltrb.min(axis=2) > 0
    max_d = ltrb.max(axis=2)
    lo = np.array([ranges[k][0] for k in locs.level])[:, None]
    hi = np.array([ranges[k][1] for k in locs.level])[:, None]
    in_range = (max_d > lo) & (max_d <= hi)
    rad = cfg.center_radius * locs.stride[:, None]
    near = (np.abs(u - centers[None, :, 0]) < rad) & (np.abs(v - centers[None, :, 1]) < rad)
    cand = inside & in_range & near
    area = (rects[:, 2] - rects[:, 0]) * (rects[:, 3] - rects[:, 1])
    cost = np.where(cand, area[None, :], np.inf)
    best = np.argmin(cost, axis=1)
    fg = np.isfinite(cost[np.arange(n), best])
    for loc in np.flatnonzero(fg):
        gi = keep[best[loc]]
        rect, _, center, theta = proj[gi]
        box = gt_boxes[gi]
        tg.labels[loc] = box.class_id
        tg.gt_index[loc] = gi
        tg.ltrb[loc] = ltrb[loc, best[loc]]
        lr, tb = tg.ltrb[loc, [0, 2]], tg.ltrb[loc, [1, 3]]
        tg.centerness[loc] = np.sqrt(lr.min() / lr.max() * tb.min() / tb.max())
        tg.raw3d[loc] = encode_raw3d(center, box.size, theta, box.class_id, locs.uv[loc],
                                     locs.stride[loc], K, cfg.f_ref)
    return tg


def mirror_targets(tg: PerspectiveTargets, locs: Locations) -> PerspectiveTargets:
    """Targets of the horizontally mirrored image, derived from ``tg``."""
    order = []
    start = 0
    for h, w in locs.shapes:
        idx = np.arange(h * w).reshape(h, w)[:, ::-1].reshape(-1)
        order.append(idx + start)
        start += h * w
    order = np.concatenate(order)
    raw = tg.raw3d[order].copy()
    raw[:, 1] *= -1
    raw[:, 7] *= -1
    return PerspectiveTargets(tg.labels[order].copy(), tg.gt_index[order].copy(),
                              tg.ltrb[order][:, [2, 1, 0, 3]].copy(), tg.centerness[order].copy(), raw)


# -- losses ---------------------------------------------------------------------

def focal_loss_terms(logits, targets: np.ndarray, alpha: float, gamma: float):
    """Elementwise sigmoid focal loss; ``targets`` is a 0/1 array."""
    p = ops.sigmoid(logits)
    log_p = ops.log_sigmoid(logits)
    log_1mp = ops.log_sigmoid(-logits)
    pos = (1.0 - p) ** gamma * log_p * (-alpha)
    neg = p ** gamma * log_1mp * (-(1.0 - alpha))
    return pos * targets + neg * (1.0 - targets)


def _is_t(*xs) -> bool:
    return any(isinstance(x, DiffTensor) for x in xs)


def _cat(parts, axis):
    return ops.concat(parts, axis=axis) if _is_t(*parts) else np.concatenate(parts, axis=axis)


def _corners(center, size, cos_t, sin_t):
    """center [F,3], size [F,3], cos/sin [F,1] (tensors or arrays) -> [F,8,3]."""
    zero = np.zeros(cos_t.shape)
    d = _cat([cos_t, zero, sin_t], 1).reshape(-1, 1, 3)
    lat = _cat([-sin_t, zero, cos_t], 1).reshape(-1, 1, 3)
    up = np.array([0.0, 1.0, 0.0])
    half = size.reshape(-1, 1, 3) * CORNER_SIGNS[None]  # [F,8,3]
    return center.reshape(-1, 1, 3) + half[:, :, 0:1] * d + half[:, :, 1:2] * lat + half[:, :, 2:3] * up


@dataclass
class _FgGeometry:
    loc_uv: np.ndarray
    stride: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    canon: np.ndarray


def _center_from(depth_raw, off, g: _FgGeometry, f_ref):
    """Apparent-frame centre [F,3] from raw depth [F,1] and offsets [F,2]."""
    z = (ops.exp(depth_raw) if _is_t(depth_raw) else np.exp(depth_raw)) * (g.fx / f_ref)[:, None]
    uc = g.loc_uv[:, 0:1] + off[:, 0:1] * g.stride[:, None]
    vc = g.loc_uv[:, 1:2] + off[:, 1:2] * g.stride[:, None]
    x = (uc - g.cx[:, None]) * z / g.fx[:, None]
    y = (vc - g.cy[:, None]) * z / g.fy[:, None]
    return _cat([x, y, z], 1)


def _theta_trig(yaw_raw, phi):
    """cos/sin of the apparent heading from raw (sin a, cos a) and ray angle phi [F,1]."""
    s, c = yaw_raw[:, 0:1], yaw_raw[:, 1:2]
    norm = (s * s + c * c + 1e-12) ** 0.5
    s, c = s / norm, c / norm
    cos_t = c * np.cos(phi) + s * np.sin(phi)
    sin_t = s * np.cos(phi) - c * np.sin(phi)
    return cos_t, sin_t


def box_corners_from_raw(raw, g: _FgGeometry, f_ref, phi=None):
    """Corners [F,8,3] from raw parts (depth, offset, size_dev, yaw).

    ``phi`` (ray angle of the centre, [F,1]) defaults to the one implied by
    the decoded centre; the loss passes the ground-truth ray so orientation
    stays disentangled from position.
    """
    depth, off, sdev, yaw = raw
    center = _center_from(depth, off, g, f_ref)
    size = (ops.exp(sdev) if _is_t(sdev) else np.exp(sdev)) * g.canon
    if phi is None:
        cen = center.data if _is_t(center) else center
        phi = np.arctan2(cen[:, 0:1], cen[:, 2:3])
    cos_t, sin_t = _theta_trig(yaw, phi)
    return _corners(center, size, cos_t, sin_t)


def _split_raw(raw):
    return raw[:, 0:1], raw[:, 1:3], raw[:, 3:6], raw[:, 6:8]


def perspective_loss(pred: PerspectivePrediction, targets: list, locs: Locations,
                     intrinsics: list, cfg: HeadConfig | None = None):
    """Total perspective loss and its components over all views.

    ``targets`` and ``intrinsics`` are per view.  Returns
    (L_pers, {"L_2D", "L_3D", "L_conf"}) as tensors.
    """
    cfg = cfg or HeadConfig()
    cls_flat, box_flat = pred.flat()
    N, L, Kc = cls_flat.shape
    cls2 = cls_flat.reshape(N * L, Kc)
    box2 = box_flat.reshape(N * L, NUM_BOX_CHANNELS)
    labels = np.concatenate([t.labels for t in targets])
    onehot = np.zeros((N * L, Kc))
    fg = labels >= 0
    onehot[np.flatnonzero(fg), labels[fg]] = 1.0
    num_fg = max(int(fg.sum()), 1)
    focal = focal_loss_terms(cls2, onehot, cfg.focal_alpha, cfg.focal_gamma).sum() * (1.0 / num_fg)

    zero = DiffTensor(np.zeros((), dtype=cls2.dtype))
    if not fg.any():
        l2d = focal + box2.sum() * 0.0
        comps = {"L_2D": l2d, "L_3D": zero, "L_conf": zero}
        total = l2d
        _check_finite(comps)
        return total, comps

    idx = np.flatnonzero(fg)
    fb = ops.take_rows(box2, idx)
    stride = np.tile(locs.stride, N)[idx]
    loc_uv = np.tile(locs.uv, (N, 1))[idx]
    view = np.repeat(np.arange(N), L)[idx]
    Ks = [apparent_intrinsics(K) for K in intrinsics]
    g = _FgGeometry(loc_uv, stride,
                    np.array([Ks[v].fx for v in view]), np.array([Ks[v].fy for v in view]),
                    np.array([Ks[v].cx for v in view]), np.array([Ks[v].cy for v in view]),
                    CANONICAL_SIZES[labels[idx]])
    t_ltrb = np.concatenate([t.ltrb for t in targets])[idx]
    t_ctr = np.concatenate([t.centerness for t in targets])[idx]
    t_raw = np.concatenate([t.raw3d for t in targets])[idx]

    # 2D box IoU loss weighted by centre-ness
    p_ltrb = ops.exp(fb[:, LTRB]) * stride[:, None]
    p_area = (p_ltrb[:, 0] + p_ltrb[:, 2]) * (p_ltrb[:, 1] + p_ltrb[:, 3])
    t_area = (t_ltrb[:, 0] + t_ltrb[:, 2]) * (t_ltrb[:, 1] + t_ltrb[:, 3])
    iw = ops.minimum(p_ltrb[:, 0], t_ltrb[:, 0]) + ops.minimum(p_ltrb[:, 2], t_ltrb[:, 2])
    ih = ops.minimum(p_ltrb[:, 1], t_ltrb[:, 1]) + ops.minimum(p_ltrb[:, 3], t_ltrb[:, 3])
    inter = iw * ih
    union = p_area + t_area - inter
    iou_l = -ops.log((inter + 1.0) / (union + 1.0))
    iou_loss = (iou_l * t_ctr).sum() * (1.0 / max(float(t_ctr.sum()), 1e-6))
    ctr_logit = fb[:, CTR]
    ctr_loss = -(ops.log_sigmoid(ctr_logit) * t_ctr + ops.log_sigmoid(-ctr_logit) * (1.0 - t_ctr)).mean()
    l2d = focal + iou_loss + ctr_loss

    # disentangled 3D corner loss
    p_raw = fb[:, DEPTH:YAW.stop]  # depth, off(2), size(3), yaw(2)
    t_parts = _split_raw(t_raw)
    p_parts = _split_raw(p_raw)
    gt_center = _center_from(t_parts[0], t_parts[1], g, cfg.f_ref)
    phi_gt = np.arctan2(gt_center[:, 0:1], gt_center[:, 2:3])
    gt_corners = box_corners_from_raw(t_parts, g, cfg.f_ref, phi_gt)
    l3d = None
    for k in range(4):
        parts = list(t_parts)
        parts[k] = p_parts[k]
        corners = box_corners_from_raw(parts, g, cfg.f_ref, phi_gt)
        term = ops.abs(corners - gt_corners).mean()
        l3d = term if l3d is None else l3d + term

    # self-supervised 3D confidence against the (constant) full-box error
    full = box_corners_from_raw(_split_raw(p_raw.data), g, cfg.f_ref)
    err = np.abs(full - gt_corners).mean(axis=(1, 2))
    conf_t = np.exp(-err / cfg.conf_temperature)
    conf_logit = fb[:, CONF]
    lconf = -(ops.log_sigmoid(conf_logit) * conf_t + ops.log_sigmoid(-conf_logit) * (1.0 - conf_t)).mean()

    comps = {"L_2D": l2d, "L_3D": l3d, "L_conf": lconf}
    _check_finite(comps)
    return l2d + l3d + lconf, comps


def _check_finite(comps):
    for name, v in comps.items():
        if not np.all(np.isfinite(v.data)):
            raise LossError(f"non-finite perspective loss component {name}")


# -- proposals ------------------------------------------------------------------

def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_proposals(cls_flat: np.ndarray, box_flat: np.ndarray, locs: Locations,
                     K: CameraIntrinsics, score_thresh: float, cfg: HeadConfig | None = None,
                     max_candidates: int | None = None):
    """Decode one view's flat outputs ([L,K], [L,14]) into camera-frame boxes.

    Returns a list of (Box3D in the true camera frame, score).
    """
    cfg = cfg or HeadConfig()
    cls_p = _sigmoid(cls_flat)
    label = cls_p.argmax(axis=1)
    score = cls_p.max(axis=1) * _sigmoid(box_flat[:, CONF])
    keep = np.flatnonzero(score > score_thresh)
    if max_candidates is not None and len(keep) > max_candidates:
        keep = keep[np.argsort(-score[keep], kind="stable")[:max_candidates]]
    out = []
    for i in keep:
        raw = box_flat[i, DEPTH:YAW.stop]
        center, size, theta = decode_raw3d(raw, int(label[i]), locs.uv[i], locs.stride[i], K, cfg.f_ref)
        box = apparent_to_camera_box(center, size, theta, K, class_id=int(label[i]),
                                     score=float(score[i]))
        out.append((box, float(score[i])))
    return out

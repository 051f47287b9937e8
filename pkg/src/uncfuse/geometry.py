"""Oriented 3D boxes, the 8-dim box encoding, rotated IoU, and NMS.

Boxes live in the LiDAR frame: x forward, y left, z up, yaw measured
counterclockwise from +x. A box is parameterized by its horizontal center
(cx, cy), the height of its bottom face z_bottom, metric dimensions
(length along heading, width, height), and yaw in (-pi, pi].

The regression encoding of a box against a reference anchor is the
8-vector (dx, dy, dz, log_l, log_w, log_h, cos_t, sin_t) with plain
center offsets in meters, log dimension ratios, and the yaw angle
embedded on the unit circle.

Rotated footprint overlap uses Sutherland-Hodgman convex clipping with a
shoelace area; duplicate vertices within 1e-12 are collapsed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

VERTEX_COLLAPSE_EPS = 1e-12
DEGENERATE_AREA_EPS = 1e-12
NEAR_PLANE_EPS = 1e-6


def normalize_yaw(t: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(float(t), 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


@dataclass(frozen=True)
class Box3D:
    """Oriented box: horizontal center, bottom-face height, dims, yaw."""

    cx: float
    cy: float
    z_bottom: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def z_center(self) -> float:
        return self.z_bottom + 0.5 * self.height

    @property
    def bev_area(self) -> float:
        return self.length * self.width

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def distance(self) -> float:
        """Horizontal range from the sensor origin to the box center."""
        return math.hypot(self.cx, self.cy)

    def to_dict(self) -> dict:
        return {
            "cx": self.cx, "cy": self.cy, "z_bottom": self.z_bottom,
            "l": self.length, "w": self.width, "h": self.height,
            "yaw": self.yaw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Box3D":
        return cls(d["cx"], d["cy"], d["z_bottom"], d["l"], d["w"], d["h"], d["yaw"])


class PriorBox(Box3D):
    """Reference anchor for the regression encoding, same fields as Box3D."""


@dataclass(frozen=True)
class BoxEncoding8:
    """8-dim regression encoding of a box relative to a PriorBox."""

    dx: float
    dy: float
    dz: float
    log_l: float
    log_w: float
    log_h: float
    cos_t: float
    sin_t: float

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.dx, self.dy, self.dz, self.log_l, self.log_w, self.log_h,
             self.cos_t, self.sin_t], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoxEncoding8":
        a = np.asarray(a, dtype=np.float64).reshape(8)
        return cls(*(float(v) for v in a))


ENCODING_DIM = 8
ENCODING_FIELDS = ("dx", "dy", "dz", "log_l", "log_w", "log_h", "cos_t", "sin_t")


@dataclass(frozen=True)
class Rect2D:
    """Axis-aligned rectangle in pixel coordinates, x right, y down."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    @property
    def center(self):
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


# Default LiDAR-to-camera rotation: x_cam = -y, y_cam = -z, z_cam = x.
_FORWARD_ROTATION = (0.0, -1.0, 0.0,
                     0.0, 0.0, -1.0,
                     1.0, 0.0, 0.0)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a rigid pose from the LiDAR frame."""

    focal: float
    cx_px: float
    cy_px: float
    width_px: int
    height_px: int
    rotation: tuple = _FORWARD_ROTATION
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.focal > 0 and self.width_px > 0 and self.height_px > 0):
            raise ValueError("camera requires positive focal length and image size")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)

    @property
    def translation_vector(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    @classmethod
    def forward_facing(cls, focal: float, width_px: int, height_px: int) -> "CameraModel":
        return cls(focal=focal, cx_px=width_px / 2.0, cy_px=height_px / 2.0,
                   width_px=width_px, height_px=height_px)

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 3) LiDAR-frame points into the camera frame."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation_matrix.T + self.translation_vector

    def project_points(self, pts: np.ndarray):
        """Pinhole projection. Returns (uv (N,2), depth (N,)); depth <= 0 is behind."""
        cam = self.to_camera(pts)
        depth = cam[:, 2]
        safe = np.where(np.abs(depth) > NEAR_PLANE_EPS, depth, NEAR_PLANE_EPS)
        u = self.focal * cam[:, 0] / safe + self.cx_px
        v = self.focal * cam[:, 1] / safe + self.cy_px
        return np.stack([u, v], axis=1), depth

    def to_dict(self) -> dict:
        return {
            "focal": self.focal, "cx_px": self.cx_px, "cy_px": self.cy_px,
            "width_px": self.width_px, "height_px": self.height_px,
            "rotation": list(self.rotation), "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["focal"], d["cx_px"], d["cy_px"], d["width_px"], d["height_px"],
                   tuple(d["rotation"]), tuple(d["translation"]))


def encode_box(box: Box3D, ref: PriorBox) -> BoxEncoding8:
    """Encode box against ref: center deltas, log dim ratios, (cos, sin) of yaw."""
    vals = (box.cx, box.cy, box.z_bottom, box.length, box.width, box.height, box.yaw,
            ref.cx, ref.cy, ref.z_bottom, ref.length, ref.width, ref.height, ref.yaw)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("encode_box: non-finite box or reference field")
    if min(box.length, box.width, box.height) <= 0 or min(ref.length, ref.width, ref.height) <= 0:
        raise ValueError("encode_box: non-positive dimensions")
    return BoxEncoding8(
        dx=box.cx - ref.cx,
        dy=box.cy - ref.cy,
        dz=box.z_bottom - ref.z_bottom,
        log_l=math.log(box.length / ref.length),
        log_w=math.log(box.width / ref.width),
        log_h=math.log(box.height / ref.height),
        cos_t=math.cos(box.yaw),
        sin_t=math.sin(box.yaw),
    )


def decode_box(enc: BoxEncoding8, ref: PriorBox) -> Box3D:
    """Invert encode_box; yaw = atan2(sin_t, cos_t), scale-invariant in (cos, sin)."""
    return Box3D(
        cx=ref.cx + enc.dx,
        cy=ref.cy + enc.dy,
        z_bottom=ref.z_bottom + enc.dz,
        length=ref.length * math.exp(enc.log_l),
        width=ref.width * math.exp(enc.log_w),
        height=ref.height * math.exp(enc.log_h),
        yaw=math.atan2(enc.sin_t, enc.cos_t),
    )


def corners_bev(box: Box3D) -> np.ndarray:
    """(4, 2) footprint corners, counterclockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.length, 0.5 * box.width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)
    return local @ rot.T + np.array([box.cx, box.cy])


def corners_3d(box: Box3D) -> np.ndarray:
    """(8, 3) corners: bottom ring then top ring, matching corners_bev order."""
    bev = corners_bev(box)
    bottom = np.column_stack([bev, np.full(4, box.z_bottom)])
    top = np.column_stack([bev, np.full(4, box.z_bottom + box.height)])
    return np.vstack([bottom, top])


def _collapse_vertices(poly: list) -> np.ndarray:
    """Drop consecutive duplicates (max-norm < 1e-12), including wraparound."""
    out = []
    for p in poly:
        if out and max(abs(p[0] - out[-1][0]), abs(p[1] - out[-1][1])) < VERTEX_COLLAPSE_EPS:
            continue
        out.append(p)
    while len(out) > 1 and max(abs(out[0][0] - out[-1][0]), abs(out[0][1] - out[-1][1])) < VERTEX_COLLAPSE_EPS:
        out.pop()
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _corners_tuples(box: Box3D) -> list:
    """Footprint corners as plain tuples, same order as corners_bev."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = 0.5 * box.length, 0.5 * box.width
    cx, cy = box.cx, box.cy
    ax, ay = c * hl - s * hw, s * hl + c * hw
    bx, by = -c * hl - s * hw, -s * hl + c * hw
    return [(cx + ax, cy + ay), (cx + bx, cy + by),
            (cx - ax, cy - ay), (cx - bx, cy - by)]


def _clip_tuples(subject: list, clip: list) -> list:
    """Sutherland-Hodgman core on tuple lists; clip must be convex CCW.

    Kept free of array allocations: this sits under every rotated-IoU call
    and the polygons never exceed eight vertices.
    """
    output = subject
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        sx, sy = inputs[-1]
        ds = ex * (sy - ay) - ey * (sx - ax)
        for px, py in inputs:
            dp = ex * (py - ay) - ey * (px - ax)
            if dp >= 0.0:
                if ds < 0.0:
                    t = ds / (ds - dp)
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
                output.append((px, py))
            elif ds >= 0.0:
                t = ds / (ds - dp)
                output.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, ds = px, py, dp
    return output


def _shoelace(pts: list) -> float:
    if len(pts) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = pts[-1]
    for x1, y1 in pts:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * abs(acc)


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon by a convex counterclockwise polygon."""
    subject_pts = [(float(p[0]), float(p[1]))
                   for p in np.asarray(subject, dtype=np.float64).reshape(-1, 2)]
    clip_pts = [(float(p[0]), float(p[1]))
                for p in np.asarray(clip, dtype=np.float64).reshape(-1, 2)]
    return _collapse_vertices(_clip_tuples(subject_pts, clip_pts))


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area, orientation-independent."""
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) < 3:
        return 0.0
    return _shoelace([(float(p[0]), float(p[1])) for p in poly])


def intersection_area_bev(a: Box3D, b: Box3D) -> float:
    return _shoelace(_clip_tuples(_corners_tuples(a), _corners_tuples(b)))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Rotated footprint IoU: clipped intersection area / union area."""
    area_a, area_b = a.bev_area, b.bev_area
    if area_a < DEGENERATE_AREA_EPS or area_b < DEGENERATE_AREA_EPS:
        return 0.0
    inter = intersection_area_bev(a, b)
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection times vertical interval overlap over union."""
    vol_a, vol_b = a.volume, b.volume
    if vol_a < DEGENERATE_AREA_EPS or vol_b < DEGENERATE_AREA_EPS:
        return 0.0
    z_lo = max(a.z_bottom, b.z_bottom)
    z_hi = min(a.z_bottom + a.height, b.z_bottom + b.height)
    dz = max(0.0, z_hi - z_lo)
    inter = intersection_area_bev(a, b) * dz
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_2d_rect(a: Rect2D, b: Rect2D) -> float:
    """Axis-aligned rectangle IoU in the image plane."""
    area_a, area_b = a.area, b.area
    if area_a < DEGENERATE_AREA_EPS or area_b < DEGENERATE_AREA_EPS:
        return 0.0
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


_BOX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0),
              (4, 5), (5, 6), (6, 7), (7, 4),
              (0, 4), (1, 5), (2, 6), (3, 7))


def project_to_image(box: Box3D, cam: CameraModel):
    """Axis-aligned pixel bounds of the projected box, clipped to the image.

    Returns None when no corner has positive depth or the projection falls
    entirely outside the image. Edges crossing the near plane are clipped at
    depth NEAR_PLANE_EPS before projecting, so partially-behind boxes still
    produce a bounded rectangle. Scalar math throughout: this runs once per
    candidate proposal and the arrays never exceed eight points.
    """
    r = cam.rotation
    tx, ty, tz = cam.translation
    bev = _corners_tuples(box)
    cam_pts = []
    for z in (box.z_bottom, box.z_bottom + box.height):
        for x, y in bev:  # bottom ring then top ring, corners_3d order
            cam_pts.append((r[0] * x + r[1] * y + r[2] * z + tx,
                            r[3] * x + r[4] * y + r[5] * z + ty,
                            r[6] * x + r[7] * y + r[8] * z + tz))
    front = [p[2] > NEAR_PLANE_EPS for p in cam_pts]
    if not any(front):
        return None
    pts = [cam_pts[i] for i in range(8) if front[i]]
    if not all(front):
        for i, j in _BOX_EDGES:
            if front[i] == front[j]:
                continue
            p, q = cam_pts[i], cam_pts[j]
            t = (NEAR_PLANE_EPS - p[2]) / (q[2] - p[2])
            pts.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]),
                        p[2] + t * (q[2] - p[2])))
    us = [cam.focal * p[0] / p[2] + cam.cx_px for p in pts]
    vs = [cam.focal * p[1] / p[2] + cam.cy_px for p in pts]
    x0 = max(min(us), 0.0)
    y0 = max(min(vs), 0.0)
    x1 = min(max(us), float(cam.width_px))
    y1 = min(max(vs), float(cam.height_px))
    if x1 <= x0 or y1 <= y0:
        return None
    return Rect2D(x0, y0, x1, y1)


def unclipped_projection(box: Box3D, cam: CameraModel):
    """Projection bounds before image clipping, None if fully behind the camera."""
    corners = corners_3d(box)
    cam_pts = cam.to_camera(corners)
    front = cam_pts[:, 2] > NEAR_PLANE_EPS
    if not front.any():
        return None
    pts = cam_pts[front]
    u = cam.focal * pts[:, 0] / pts[:, 2] + cam.cx_px
    v = cam.focal * pts[:, 1] / pts[:, 2] + cam.cy_px
    return Rect2D(float(u.min()), float(v.min()), float(u.max()), float(v.max()))


def nms_indices(boxes, scores, iou_thresh: float, iou_kind: str = "bev",
                cam: CameraModel | None = None) -> list:
    """Greedy descending-score suppression; returns kept indices in score order.

    A candidate is dropped iff its IoU with an already-kept box exceeds
    iou_thresh. Score ties break toward the earlier index (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: non-finite score")
    if len(boxes) != len(scores):
        raise ValueError("nms: boxes and scores length mismatch")
    if iou_kind == "bev":
        pair_iou = iou_bev
        items = list(boxes)
    elif iou_kind == "3d":
        pair_iou = iou_3d
        items = list(boxes)
    elif iou_kind == "2d":
        if cam is None:
            raise ValueError("nms: iou_kind '2d' requires a camera")
        pair_iou = None
        items = [project_to_image(b, cam) for b in boxes]
    else:
        raise ValueError(f"nms: unknown iou_kind {iou_kind!r}")

    order = np.argsort(-scores, kind="stable")
    kept = []
    for idx in order:
        i = int(idx)
        suppressed = False
        for k in kept:
            if iou_kind == "2d":
                if items[i] is None or items[k] is None:
                    continue
                overlap = iou_2d_rect(items[i], items[k])
            else:
                overlap = pair_iou(items[i], items[k])
            if overlap > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def nms(dets, iou_thresh: float, iou_kind: str = "bev", cam: CameraModel | None = None):
    """NMS over (Box3D, score) pairs; kept pairs returned sorted by score descending."""
    boxes = [d[0] for d in dets]
    scores = [d[1] for d in dets]
    keep = nms_indices(boxes, scores, iou_thresh, iou_kind, cam)
    return [(boxes[i], float(scores[i])) for i in keep]

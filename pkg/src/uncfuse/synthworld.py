"""Procedural driving-like scenes with a simulated LiDAR and camera.

Each frame places car-like boxes inside the range gate and camera field of
view, samples LiDAR returns on their visible surfaces with density falling
off as 1/distance^2, shadows points that fall behind nearer objects, adds
ground clutter, and renders a synthetic front-view feature raster
(silhouette mask, inverse depth, noise channel) standing in for a learned
image backbone.

Annotation difficulty: each object receives an "unsure" label with
probability sigmoid(a0 + a1*distance + a2*occlusion - a3*ln(1+n_points)),
and unsure objects get extra Gaussian jitter on their points. Difficulty is
therefore visible in the measurements themselves, which is what the
uncertainty analysis stage is meant to recover.

Coordinates are quantized to 1/1024 m so dataset serialization round-trips
bit-exactly through compact decimal JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .config import WorldConfig
from .geometry import (Box3D, CameraModel, clip_polygon, corners_bev, iou_bev,
                       polygon_area, project_to_image)
from .rng import Rng

QUANTUM = 1.0 / 1024.0
# Camera sits at the LiDAR origin, 1.2 m above ground, looking along +x.
CAMERA_HEIGHT = 1.2
# Fraction of an object's point budget cast on its top face.
TOP_FACE_FRACTION = 0.15


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    """One labeled object: box plus annotation attributes."""

    box: Box3D
    occlusion: int
    truncation: float
    n_points: int
    distance: float
    unsure: bool

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "occlusion": self.occlusion,
            "truncation": self.truncation,
            "n_points": self.n_points,
            "distance": self.distance,
            "unsure": self.unsure,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(box=Box3D.from_dict(d["box"]), occlusion=int(d["occlusion"]),
                   truncation=float(d["truncation"]), n_points=int(d["n_points"]),
                   distance=float(d["distance"]), unsure=bool(d["unsure"]))


@dataclass(frozen=True)
class Frame:
    """One scene: point cloud, front-view raster, labeled objects, camera."""

    frame_id: str
    points: np.ndarray
    image_raster: np.ndarray
    objects: tuple
    camera: CameraModel


def quantize(a: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(a, dtype=np.float64) / QUANTUM) * QUANTUM


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside the box (boundaries inclusive)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    z = pts[:, 2]
    return ((np.abs(u) <= 0.5 * box.length) & (np.abs(v) <= 0.5 * box.width)
            & (z >= box.z_bottom) & (z <= box.z_bottom + box.height))


def unsure_probability(distance: float, occlusion: int, n_points: int,
                       cfg: WorldConfig) -> float:
    """sigmoid(a0 + a1*distance + a2*occlusion - a3*ln(1+n_points))."""
    x = (cfg.unsure_a0 + cfg.unsure_a1 * distance + cfg.unsure_a2 * occlusion
         - cfg.unsure_a3 * math.log1p(n_points))
    return 1.0 / (1.0 + math.exp(-x))


def assign_unsure(obj: SceneObject, cfg: WorldConfig, rng: Rng) -> bool:
    p = unsure_probability(obj.distance, obj.occlusion, obj.n_points, cfg)
    return bool(rng.uniform() < p)


def _default_camera(cfg: WorldConfig) -> CameraModel:
    base = CameraModel.forward_facing(cfg.focal, cfg.image_width, cfg.image_height)
    # p_cam = R p + t with the camera center at (0, 0, CAMERA_HEIGHT).
    t = -base.rotation_matrix @ np.array([0.0, 0.0, CAMERA_HEIGHT])
    return replace(base, translation=tuple(float(v) for v in t))


def _place_objects(cfg: WorldConfig, rng: Rng) -> list:
    n_goal = cfg.min_objects + int(rng.integers(cfg.max_objects - cfg.min_objects + 1))
    max_az = math.radians(cfg.max_azimuth_deg)
    boxes = []
    for _ in range(n_goal):
        for _ in range(cfg.placement_retries):
            r = rng.uniform(cfg.min_range, cfg.max_range)
            az = rng.uniform(-max_az, max_az)
            yaw = rng.uniform(-math.pi, math.pi)
            length = float(np.clip(cfg.mean_length + cfg.length_std * rng.normal(),
                                   0.6 * cfg.mean_length, 1.4 * cfg.mean_length))
            width = float(np.clip(cfg.mean_width + cfg.width_std * rng.normal(),
                                  0.6 * cfg.mean_width, 1.4 * cfg.mean_width))
            height = float(np.clip(cfg.mean_height + cfg.height_std * rng.normal(),
                                   0.6 * cfg.mean_height, 1.4 * cfg.mean_height))
            cx = r * math.cos(az)
            cy = r * math.sin(az)
            margin = 1.0
            if not (cfg.x_min + margin <= cx <= cfg.x_max - margin
                    and cfg.y_min + margin <= cy <= cfg.y_max - margin):
                continue
            box = Box3D(cx, cy, 0.0, length, width, height, yaw)
            if all(iou_bev(box, other) < cfg.max_overlap_iou for other in boxes):
                boxes.append(box)
                break
    return boxes


def _face_points(cfg: WorldConfig, box: Box3D, n: int, rng: Rng) -> np.ndarray:
    """Sample n returns on the visible side faces and the top face."""
    if n <= 0:
        return np.zeros((0, 3), dtype=np.float64)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    center = np.array([box.cx, box.cy])
    # Side faces: (outward normal, face center offset, in-plane extent).
    axes = np.array([[c, s], [-s, c]])
    faces = []
    for axis, half, extent in ((0, 0.5 * box.length, box.width),
                               (1, 0.5 * box.width, box.length)):
        for sign in (1.0, -1.0):
            normal = sign * axes[axis]
            face_c = center + normal * half
            view = face_c / max(np.linalg.norm(face_c), 1e-9)
            facing = -float(normal @ view)
            if facing > 0.0:
                faces.append((normal, face_c, extent, facing * extent * box.height))
    weights = np.array([f[3] for f in faces], dtype=np.float64)
    n_top = int(round(TOP_FACE_FRACTION * n)) if n >= 4 else 0
    n_side = n - n_top
    if weights.sum() <= 0:
        n_top, n_side = n, 0
        counts = []
    else:
        raw = n_side * weights / weights.sum()
        counts = np.floor(raw).astype(int)
        rem = n_side - counts.sum()
        for i in np.argsort(-(raw - counts))[:rem]:
            counts[i] += 1
    out = []
    for (normal, face_c, extent, _), k in zip(faces, counts):
        if k <= 0:
            continue
        tang = np.array([-normal[1], normal[0]])
        u = rng.uniform(-0.5, 0.5, size=k) * extent
        v = rng.uniform(0.0, 1.0, size=k) * box.height
        xy = face_c[None, :] + u[:, None] * tang[None, :]
        out.append(np.column_stack([xy, box.z_bottom + v]))
    if n_top > 0:
        u = rng.uniform(-0.5, 0.5, size=n_top) * box.length
        v = rng.uniform(-0.5, 0.5, size=n_top) * box.width
        xy = center[None, :] + u[:, None] * axes[0][None, :] + v[:, None] * axes[1][None, :]
        out.append(np.column_stack([xy, np.full(n_top, box.z_bottom + box.height)]))
    pts = np.vstack(out) if out else np.zeros((0, 3), dtype=np.float64)
    if cfg.point_noise > 0 and len(pts):
        pts = pts + cfg.point_noise * rng.normal(size=pts.shape)
    return pts


def _azimuth_interval(box: Box3D):
    az = np.arctan2(corners_bev(box)[:, 1], corners_bev(box)[:, 0])
    return float(az.min()), float(az.max())


def _covered_fraction(interval, blockers) -> float:
    lo, hi = interval
    span = hi - lo
    if span <= 0:
        return 0.0
    segs = []
    for a, b in blockers:
        a, b = max(a, lo), min(b, hi)
        if b > a:
            segs.append((a, b))
    segs.sort()
    covered = 0.0
    cur_lo, cur_hi = None, None
    for a, b in segs:
        if cur_lo is None:
            cur_lo, cur_hi = a, b
        elif a <= cur_hi:
            cur_hi = max(cur_hi, b)
        else:
            covered += cur_hi - cur_lo
            cur_lo, cur_hi = a, b
    if cur_lo is not None:
        covered += cur_hi - cur_lo
    return covered / span


def _occlusion_ordinal(frac: float, cfg: WorldConfig) -> int:
    t0, t1, t2 = cfg.occlusion_thresholds
    if frac < t0:
        return 0
    if frac < t1:
        return 1
    if frac < t2:
        return 2
    return 3


def _truncation(box: Box3D, cfg: WorldConfig) -> float:
    gate = np.array([[cfg.x_min, cfg.y_min], [cfg.x_max, cfg.y_min],
                     [cfg.x_max, cfg.y_max], [cfg.x_min, cfg.y_max]])
    inside = polygon_area(clip_polygon(corners_bev(box), gate))
    area = box.bev_area
    if area <= 0:
        return 0.0
    return float(min(max(1.0 - inside / area, 0.0), 1.0))


def _render_raster(cfg: WorldConfig, boxes, camera: CameraModel, rng: Rng) -> np.ndarray:
    h, w = cfg.image_height, cfg.image_width
    raster = np.zeros((h, w, 3), dtype=np.float64)
    raster[:, :, 2] = rng.uniform(size=(h, w))
    # Painter's algorithm: far objects first, near ones overwrite.
    for box in sorted(boxes, key=lambda b: -b.distance):
        rect = project_to_image(box, camera)
        if rect is None:
            continue
        c0, c1 = int(math.floor(rect.x0)), int(math.ceil(rect.x1))
        r0, r1 = int(math.floor(rect.y0)), int(math.ceil(rect.y1))
        c0, c1 = max(c0, 0), min(c1, w)
        r0, r1 = max(r0, 0), min(r1, h)
        if c1 > c0 and r1 > r0:
            raster[r0:r1, c0:c1, 0] = 1.0
            raster[r0:r1, c0:c1, 1] = 1.0 / (1.0 + box.distance / 10.0)
    return quantize(raster).astype(np.float32)


def generate_scene(cfg: WorldConfig, seed: int, frame_id: str | None = None,
                   stream: str = "world") -> Frame:
    """Generate one deterministic frame from (cfg, seed, stream)."""
    root = Rng(seed, stream)
    layout_rng = root.split("layout")
    points_rng = root.split("points")
    labels_rng = root.split("labels")
    jitter_rng = root.split("jitter")
    image_rng = root.split("image")

    camera = _default_camera(cfg)
    boxes = _place_objects(cfg, layout_rng)

    clouds = []
    for box in boxes:
        d = max(box.distance, 1.0)
        n_target = min(cfg.max_points_per_object, int(round(cfg.lidar_budget / (d * d))))
        clouds.append(_face_points(cfg, box, n_target, points_rng))

    # A point is shadowed when its azimuth falls inside a nearer object's
    # angular footprint; shadowed points survive with small probability.
    intervals = [_azimuth_interval(b) for b in boxes]
    distances = [b.distance for b in boxes]
    occ_fracs = []
    for i, box in enumerate(boxes):
        blockers = [intervals[j] for j in range(len(boxes))
                    if j != i and distances[j] < distances[i]]
        occ_fracs.append(_covered_fraction(intervals[i], blockers))
        if blockers and len(clouds[i]):
            az = np.arctan2(clouds[i][:, 1], clouds[i][:, 0])
            shadowed = np.zeros(len(az), dtype=bool)
            for a, b in blockers:
                shadowed |= (az >= a) & (az <= b)
            drop = shadowed & (points_rng.uniform(size=len(az)) < cfg.shadow_drop_prob)
            clouds[i] = clouds[i][~drop]

    if cfg.clutter_points > 0:
        cx = points_rng.uniform(cfg.x_min, cfg.x_max, size=cfg.clutter_points)
        cy = points_rng.uniform(cfg.y_min, cfg.y_max, size=cfg.clutter_points)
        cz = np.abs(points_rng.normal(size=cfg.clutter_points)) * cfg.clutter_z_std
        clutter = np.column_stack([cx, cy, cz])
    else:
        clutter = np.zeros((0, 3), dtype=np.float64)

    # Label difficulty from the pre-jitter evidence, then corrupt unsure
    # objects' points and recount so stored n_points matches the final cloud.
    pre_counts = [int(points_in_box(quantize(cl), box).sum()) if len(cl) else 0
                  for cl, box in zip(clouds, boxes)]
    objects = []
    for box, occ_frac, n_pre in zip(boxes, occ_fracs, pre_counts):
        occ = _occlusion_ordinal(occ_frac, cfg)
        p = unsure_probability(box.distance, occ, n_pre, cfg)
        unsure = bool(labels_rng.uniform() < p)
        objects.append((box, occ, unsure))

    for i, (box, occ, unsure) in enumerate(objects):
        if unsure and cfg.unsure_jitter > 0 and len(clouds[i]):
            clouds[i] = clouds[i] + cfg.unsure_jitter * jitter_rng.normal(size=clouds[i].shape)

    all_pts = np.vstack([c for c in clouds if len(c)] + [clutter]) if (clouds or len(clutter)) \
        else np.zeros((0, 3), dtype=np.float64)
    all_pts = quantize(all_pts)
    keep = ((all_pts[:, 0] >= cfg.x_min) & (all_pts[:, 0] < cfg.x_max)
            & (all_pts[:, 1] >= cfg.y_min) & (all_pts[:, 1] < cfg.y_max)
            & (all_pts[:, 2] >= cfg.z_min) & (all_pts[:, 2] <= cfg.z_max))
    all_pts = all_pts[keep]

    scene_objects = []
    for box, occ, unsure in objects:
        n_final = int(points_in_box(all_pts, box).sum())
        scene_objects.append(SceneObject(
            box=box, occlusion=occ, truncation=_truncation(box, cfg),
            n_points=n_final, distance=box.distance, unsure=unsure))

    raster = _render_raster(cfg, boxes, camera, image_rng)
    fid = frame_id if frame_id is not None else f"frame-{seed}"
    return Frame(frame_id=fid, points=all_pts, image_raster=raster,
                 objects=tuple(scene_objects), camera=camera)


def make_dataset(cfg: WorldConfig, seed: int, n_frames: int, split: str = "train") -> list:
    """n_frames frames on independent per-frame streams world/<split>/<i>."""
    return [generate_scene(cfg, seed, frame_id=f"{split}-{i:06d}",
                           stream=f"world/{split}/{i}")
            for i in range(n_frames)]


def inject_temporal_misalignment(frame: Frame, sigma: float, rng: Rng) -> Frame:
    """Shift every point by one shared (dx, dy) ~ N(0, sigma^2 I) draw.

    Boxes, camera, and the image raster stay fixed, so the cloud is
    misaligned relative to both the labels and the camera.
    """
    if sigma < 0:
        raise ValueError("inject_temporal_misalignment: sigma must be >= 0")
    shift = sigma * rng.normal(size=2)
    pts = np.array(frame.points, dtype=np.float64, copy=True)
    if len(pts):
        pts[:, 0] += shift[0]
        pts[:, 1] += shift[1]
    return Frame(frame_id=frame.frame_id, points=pts, image_raster=frame.image_raster,
                 objects=frame.objects, camera=frame.camera)


def frame_to_dict(frame: Frame) -> dict:
    raster = np.asarray(frame.image_raster, dtype=np.float64)
    h, w, c = raster.shape
    return {
        "frame_id": frame.frame_id,
        "points": np.asarray(frame.points, dtype=np.float64).tolist(),
        "image": {"h": h, "w": w, "c": c, "data": raster.reshape(-1).tolist()},
        "camera": frame.camera.to_dict(),
        "objects": [o.to_dict() for o in frame.objects],
    }


def frame_from_dict(d: dict) -> Frame:
    img = d["image"]
    raster = np.asarray(img["data"], dtype=np.float64).reshape(img["h"], img["w"], img["c"])
    return Frame(
        frame_id=str(d["frame_id"]),
        points=np.asarray(d["points"], dtype=np.float64).reshape(-1, 3),
        image_raster=raster.astype(np.float32),
        objects=tuple(SceneObject.from_dict(o) for o in d["objects"]),
        camera=CameraModel.from_dict(d["camera"]),
    )


def write_dataset(frames, path):
    """JSON-lines, one frame per line, bit-exact float round-trip."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list:
    frames = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"line {lineno}: malformed JSON ({e})") from e
            try:
                frames.append(frame_from_dict(d))
            except (KeyError, TypeError, ValueError) as e:
                field = e.args[0] if isinstance(e, KeyError) else e
                raise DatasetError(f"line {lineno}: bad or missing field: {field}") from e
    return frames

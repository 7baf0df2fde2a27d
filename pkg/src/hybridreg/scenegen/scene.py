"""Procedural hybrid-motion scenes, pinhole cameras and analytic depth rendering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NoQualifyingPair, NoValidPose
from ..geom import MotionLabel, PointCloud, RigidTransform, rot_z
from .primitives import Box, Capsule, RoomBox, Sphere, aabb_overlap

DEPTH_EPS = 1e-6


# --- scene content -------------------------------------------------------


@dataclass
class StaticObject:
    parts: list
    label: MotionLabel = MotionLabel.BACKGROUND

    def aabb(self):
        return _union_aabb(self.parts)


@dataclass
class MovableObject:
    parts: list  # object-local
    base_pose: RigidTransform
    label: MotionLabel = MotionLabel.RIGID_FOREGROUND

    def parts_local(self, t: int) -> list:
        return self.parts


@dataclass
class Limb:
    """Capsule swinging about ``axis`` at ``joint``; angle is sinusoidal in time."""

    joint: np.ndarray
    length: float
    radius: float
    amplitude: float
    phase: float
    rest_angle: float = 0.0
    hang: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))

    def direction(self, t: float, period: float) -> np.ndarray:
        from ..geom import axis_angle

        ang = self.rest_angle + self.amplitude * np.sin(2 * np.pi * t / period + self.phase)
        return axis_angle(self.axis, ang) @ self.hang

    def end(self, t: float, period: float) -> np.ndarray:
        return self.joint + self.length * self.direction(t, period)


# sample fractions along each capsule axis used as deformation "vertices"
_VERTEX_U = np.linspace(0.0, 1.0, 5)


@dataclass
class DeformableAgent:
    body: list  # rigid parts, agent-local
    limbs: list[Limb]
    base_pose: RigidTransform
    period: float = 16.0
    breathing: float = 0.05
    kind: str = "human"
    label: MotionLabel = MotionLabel.NONRIGID_FOREGROUND

    def parts_local(self, t: int) -> list:
        scale = 1.0 + self.breathing * np.sin(2 * np.pi * t / self.period)
        parts = list(self.body)
        for limb in self.limbs:
            parts.append(Capsule(limb.joint, limb.end(t, self.period), limb.radius * scale))
        return parts

    def vertices_local(self, t: int) -> np.ndarray:
        """Tracked points of the deformation field, excluding any rigid placement."""
        verts = []
        for p in self.body:
            if isinstance(p, Capsule):
                verts.extend(p.a + u * (p.b - p.a) for u in _VERTEX_U)
            elif isinstance(p, Sphere):
                verts.append(p.center)
            else:
                verts.append(p.center)
        for limb in self.limbs:
            e = limb.end(t, self.period)
            verts.extend(limb.joint + u * (e - limb.joint) for u in _VERTEX_U)
        return np.array(verts)


def _union_aabb(parts):
    boxes = [p.aabb() for p in parts]
    return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)


@dataclass
class Scene:
    room: RoomBox | None
    static_objects: list[StaticObject]
    movable_objects: list[MovableObject]
    deformable_agents: list[DeformableAgent]
    center: np.ndarray
    rng_seed: int = 0
    # dynamic objects orbit the vertical axis through ``center`` so the key
    # animation stays framed while the camera moves
    follow_yaw_deg_per_frame: float = 0.0
    follow_ref_frame: int = 0
    jitter_xy: float = 0.0
    jitter_yaw_deg: float = 0.0

    @property
    def dynamic_objects(self) -> list:
        return list(self.movable_objects) + list(self.deformable_agents)

    def dynamic_pose(self, k: int, t: int) -> RigidTransform:
        obj = self.dynamic_objects[k]
        pose = obj.base_pose
        if self.jitter_xy > 0 or self.jitter_yaw_deg > 0:
            rng = np.random.default_rng([self.rng_seed, 104729, k, int(t)])
            dxy = rng.normal(scale=self.jitter_xy, size=2) if self.jitter_xy > 0 else np.zeros(2)
            dyaw = rng.normal(scale=self.jitter_yaw_deg) if self.jitter_yaw_deg > 0 else 0.0
            pose = pose.compose(RigidTransform(rot_z(dyaw), [dxy[0], dxy[1], 0.0]))
        yaw = self.follow_yaw_deg_per_frame * (t - self.follow_ref_frame)
        if yaw != 0.0:
            c = np.array([self.center[0], self.center[1], 0.0])
            r = rot_z(yaw)
            pose = RigidTransform(r, c - r @ c).compose(pose)
        return pose

    def primitives(self, t: int, include_dynamic: bool = True, dynamic_time: int | None = None):
        """World-space primitives as (primitive, label, object id) triples.

        Object id 0 is the room, then static objects, then dynamic ones.
        """
        out = [] if self.room is None else [(self.room, MotionLabel.BACKGROUND, 0)]
        oid = 1
        for s in self.static_objects:
            out.extend((p, s.label, oid) for p in s.parts)
            oid += 1
        if include_dynamic:
            td = t if dynamic_time is None else dynamic_time
            for k, obj in enumerate(self.dynamic_objects):
                pose = self.dynamic_pose(k, td)
                out.extend((p.transformed(pose), obj.label, oid + k) for p in obj.parts_local(td))
        return out

    def object_aabbs(self, t: int = 0) -> list:
        boxes = [s.aabb() for s in self.static_objects]
        for k, obj in enumerate(self.dynamic_objects):
            pose = self.dynamic_pose(k, t)
            boxes.append(_union_aabb([p.transformed(pose) for p in obj.parts_local(t)]))
        return boxes


def cast_rays(scene: Scene, origins, dirs, t: int, include_dynamic=True, dynamic_time=None):
    """Nearest hit per ray: (distance, label, object id); distance inf on a miss."""
    n = len(origins)
    best = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.uint8)
    obj = np.full(n, -1, dtype=np.int64)
    for prim, lab, oid in scene.primitives(t, include_dynamic, dynamic_time):
        d = prim.intersect(origins, dirs)
        closer = d < best
        best[closer] = d[closer]
        label[closer] = lab
        obj[closer] = oid
    return best, label, obj


# --- cameras -------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``pose`` maps world to camera coordinates (x right, y down, z forward)."""

    pose: RigidTransform
    focal: float = 138.5640646055102  # 60 deg horizontal FOV at 160 px
    width: int = 160
    height: int = 120
    azimuth_deg: float | None = None
    elevation_deg: float | None = None

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.width < 16 or self.height < 16:
            raise ValueError("resolution must be at least 16x16")

    @property
    def position(self) -> np.ndarray:
        return -self.pose.rotation.T @ self.pose.translation

    @property
    def forward(self) -> np.ndarray:
        return self.pose.rotation[2]

    def pixel_grid(self) -> np.ndarray:
        rows, cols = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([rows.ravel(), cols.ravel()], axis=1)

    def rays_through(self, pixels_uv: np.ndarray):
        """World rays through image coordinates (u = column, v = row, continuous)."""
        cx, cy = self.width / 2.0, self.height / 2.0
        d_cam = np.stack(
            [(pixels_uv[:, 0] - cx) / self.focal, (pixels_uv[:, 1] - cy) / self.focal, np.ones(len(pixels_uv))],
            axis=1,
        )
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        dirs = d_cam @ self.pose.rotation
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def pixel_rays(self):
        pix = self.pixel_grid()
        uv = np.stack([pix[:, 1] + 0.5, pix[:, 0] + 0.5], axis=1)
        o, d = self.rays_through(uv)
        return o, d, pix

    def project(self, world_pts: np.ndarray):
        """Image coordinates (u, v) and depth z for world points."""
        pc = self.pose.apply(world_pts)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * pc[:, 0] / z + self.width / 2.0
            v = self.focal * pc[:, 1] / z + self.height / 2.0
        return u, v, z


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return RigidTransform(r, -r @ position)


@dataclass
class CameraConfig:
    radius: float = 2.0
    azimuth_step_deg: float = 30.0
    elevation_step_deg: float = 15.0
    elevation_max_deg: float = 45.0
    standoff: float = 1.2
    width: int = 160
    height: int = 120
    hfov_deg: float = 60.0

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / np.tan(np.radians(self.hfov_deg) / 2.0)


def camera_on_grid(scene: Scene, az: float, el: float, cfg: CameraConfig, offset=None, look_shift: float = 0.0) -> Camera:
    """Grid pose, optionally moved by ``offset``; it aims at the scene center
    or, with ``look_shift``, at a point that far to the side of it (horizontal,
    perpendicular to the viewing direction)."""
    a, e = np.radians(az), np.radians(el)
    pos = scene.center + cfg.radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    if offset is not None:
        pos = pos + offset
    target = scene.center
    if look_shift:
        side = np.cross(scene.center - pos, [0.0, 0.0, 1.0])
        target = scene.center + look_shift * side / np.linalg.norm(side)
    return Camera(look_at(pos, target), cfg.focal, cfg.width, cfg.height, az, el)


def candidate_poses(scene: Scene, cfg: CameraConfig | None = None) -> list[Camera]:
    cfg = cfg or CameraConfig()
    azs = np.arange(0.0, 360.0, cfg.azimuth_step_deg)
    els = np.arange(0.0, cfg.elevation_max_deg + 1e-9, cfg.elevation_step_deg)
    return [camera_on_grid(scene, az, el, cfg) for el in els for az in azs]


def standoff_distance(scene: Scene, p, t: int = 0) -> float:
    return min((prim.distance(p) for prim, _, _ in scene.primitives(t)), default=np.inf)


def sample_camera_poses(scene: Scene, cfg: CameraConfig | None = None) -> list[Camera]:
    """Grid poses aimed at the scene center, keeping only those with enough standoff."""
    cfg = cfg or CameraConfig()
    cams = [c for c in candidate_poses(scene, cfg) if standoff_distance(scene, c.position) >= cfg.standoff]
    if not cams:
        raise NoValidPose("no camera pose satisfies the standoff distance")
    return cams


# --- rendering -----------------------------------------------------------


def _cast_camera(scene, cam, time, include_dynamic=True, dynamic_time=None):
    o, d, pix = cam.pixel_rays()
    dist, label, obj = cast_rays(scene, o, d, time, include_dynamic, dynamic_time)
    return o, d, pix, dist, label, obj


def depth_image(scene: Scene, cam: Camera, time: int, include_dynamic=True, dynamic_time=None) -> np.ndarray:
    """Camera-z depth per pixel, ``inf`` where nothing is hit."""
    o, d, _, dist, _, _ = _cast_camera(scene, cam, time, include_dynamic, dynamic_time)
    z = np.where(np.isfinite(dist), dist * (d @ cam.forward), np.inf)
    return z.reshape(cam.height, cam.width)


def render_depth(
    scene: Scene, cam: Camera, time: int, include_dynamic=True, dynamic_time=None, max_depth: float | None = None
) -> PointCloud:
    """World-space point per pixel hit, labeled by the hit object's motion class."""
    o, d, pix, dist, label, _ = _cast_camera(scene, cam, time, include_dynamic, dynamic_time)
    keep = np.isfinite(dist)
    if max_depth is not None:
        keep &= dist * (d @ cam.forward) <= max_depth
    pts = o[keep] + dist[keep, None] * d[keep]
    return PointCloud(pts, label[keep], pix[keep])


def compute_nonrigid_proportion(scene: Scene, cam: Camera, time: int) -> float:
    """Fraction of pixels whose depth changes when all dynamic objects are removed."""
    with_dyn = depth_image(scene, cam, time, include_dynamic=True)
    without = depth_image(scene, cam, time, include_dynamic=False)
    both_miss = np.isinf(with_dyn) & np.isinf(without)
    with np.errstate(invalid="ignore"):
        same = both_miss | (np.abs(with_dyn - without) <= DEPTH_EPS)
    return float(np.count_nonzero(~same) / same.size)


def change_coefficient(agent: DeformableAgent, t0: int, t1: int) -> float:
    """Mean vertex displacement of the deformation field between two frames."""
    return float(np.mean(np.linalg.norm(agent.vertices_local(t1) - agent.vertices_local(t0), axis=1)))


def select_frame_pair(scene: Scene, n_frames: int, threshold: float = 0.25, start: int = 0, agent: int | None = None):
    """First frame after ``start`` whose deformation change exceeds ``threshold``.

    With ``agent`` unset the most deformed agent decides.
    """
    if n_frames - start < 2:
        raise NoQualifyingPair("need at least two frames")
    if not scene.deformable_agents:
        raise NoQualifyingPair("scene has no deformable agent")
    agents = scene.deformable_agents if agent is None else [scene.deformable_agents[agent]]
    for b in range(start + 1, n_frames):
        if max(change_coefficient(a, start, b) for a in agents) > threshold:
            return start, b
    raise NoQualifyingPair(f"no frame exceeds change coefficient {threshold}")


# --- random scene synthesis ----------------------------------------------


@dataclass
class SceneConfig:
    room_half: float = 4.0
    room_height: float = 4.0
    center_height: float = 1.25
    inner_radius: float = 0.6
    movable_radius: float = 1.0
    furniture_min_radius: float = 2.8
    n_humans: tuple[int, int] = (1, 2)
    n_animals: tuple[int, int] = (0, 1)
    n_movable: tuple[int, int] = (2, 6)
    n_furniture: tuple[int, int] = (9, 13)
    n_floating: tuple[int, int] = (2, 4)
    n_wall_panels: tuple[int, int] = (6, 10)
    table_prob: float = 0.3
    jitter_xy: float = 0.01
    jitter_yaw_deg: float = 0.5
    max_tries: int = 200


def make_human(rng: np.random.Generator, pose: RigidTransform) -> DeformableAgent:
    s = rng.uniform(0.9, 1.1)
    body = [
        Capsule(np.array([0.0, 0.0, 0.85 * s]), np.array([0.0, 0.0, 1.35 * s]), 0.17 * s),
        Sphere(np.array([0.0, 0.0, 1.58 * s]), 0.12 * s),
    ]
    leg_amp = rng.uniform(0.7, 0.95)
    arm_amp = rng.uniform(0.8, 1.1)
    ph = rng.uniform(0, 2 * np.pi)
    limbs = [
        Limb(np.array([0.1 * s, 0.0, 0.85 * s]), 0.72 * s, 0.07 * s, leg_amp, ph),
        Limb(np.array([-0.1 * s, 0.0, 0.85 * s]), 0.72 * s, 0.07 * s, leg_amp, ph + np.pi),
        Limb(np.array([0.26 * s, 0.0, 1.35 * s]), 0.6 * s, 0.05 * s, arm_amp, ph + np.pi),
        Limb(np.array([-0.26 * s, 0.0, 1.35 * s]), 0.6 * s, 0.05 * s, arm_amp, ph),
    ]
    return DeformableAgent(body, limbs, pose, period=float(rng.integers(12, 20)), kind="human")


def make_animal(rng: np.random.Generator, pose: RigidTransform) -> DeformableAgent:
    s = rng.uniform(0.8, 1.2)
    body = [
        Capsule(np.array([-0.3 * s, 0.0, 0.45 * s]), np.array([0.3 * s, 0.0, 0.45 * s]), 0.14 * s),
        Sphere(np.array([0.45 * s, 0.0, 0.62 * s]), 0.1 * s),
    ]
    amp = rng.uniform(0.4, 0.7)
    ph = rng.uniform(0, 2 * np.pi)
    y_axis = np.array([0.0, 1.0, 0.0])
    limbs = [
        Limb(np.array([sx * 0.25 * s, sy * 0.09 * s, 0.4 * s]), 0.34 * s, 0.04 * s, amp, ph + off, axis=y_axis)
        for sx, sy, off in ((1, 1, 0.0), (1, -1, np.pi), (-1, 1, np.pi), (-1, -1, 0.0))
    ]
    return DeformableAgent(body, limbs, pose, period=float(rng.integers(8, 14)), kind="animal")


def _table(c, half, rot, leg=0.03, slab=0.025):
    """Table top plus four legs filling the footprint ``half`` around ``c``."""
    top_c = c + np.array([0.0, 0.0, half[2] - slab])
    parts = [Box(top_c, np.array([half[0], half[1], slab]), rot)]
    leg_h = half[2] - slab
    for sx in (-1, 1):
        for sy in (-1, 1):
            off = rot @ np.array([sx * (half[0] - leg), sy * (half[1] - leg), 0.0])
            parts.append(Box(np.array([c[0] + off[0], c[1] + off[1], leg_h]), np.array([leg, leg, leg_h]), rot))
    return parts


def _random_small_object(rng):
    if rng.random() < 0.5:
        return [Sphere(np.zeros(3), float(rng.uniform(0.12, 0.28)))]
    return [Box(np.zeros(3), rng.uniform(0.1, 0.3, size=3))]


def random_scene(rng: np.random.Generator, cfg: SceneConfig | None = None, seed: int = 0, n_movable=None) -> Scene:
    """Room with furniture, floating clutter, deformable agents and movable objects.

    Placement is rejection-sampled so that no two objects' bounding boxes
    overlap at frame 0 and every object stays inside the room.
    """
    cfg = cfg or SceneConfig()
    h = cfg.room_half
    room = RoomBox(np.array([-h, -h, 0.0]), np.array([h, h, cfg.room_height]))
    center = np.array([0.0, 0.0, cfg.center_height])
    placed: list = []

    def fits(box, margin=0.02) -> bool:
        if not room.contains(box[0], box[1]):
            return False
        return not any(aabb_overlap(box, other, margin) for other in placed)

    agents: list[DeformableAgent] = []
    n_h = int(rng.integers(cfg.n_humans[0], cfg.n_humans[1] + 1))
    n_a = int(rng.integers(cfg.n_animals[0], cfg.n_animals[1] + 1))
    for kind in ["human"] * n_h + ["animal"] * n_a:
        for _ in range(cfg.max_tries):
            r = cfg.inner_radius * np.sqrt(rng.random())
            phi = rng.uniform(0, 2 * np.pi)
            pos = np.array([r * np.cos(phi), r * np.sin(phi), 0.0])
            if any(np.linalg.norm(pos[:2] - a.base_pose.translation[:2]) < 0.5 for a in agents):
                continue
            pose = RigidTransform(rot_z(rng.uniform(0, 360)), pos)
            agent = make_human(rng, pose) if kind == "human" else make_animal(rng, pose)
            box = _union_aabb([p.transformed(pose) for p in agent.parts_local(0)])
            box = (np.maximum(box[0], [-h, -h, 0.0]), box[1])  # feet may graze the floor
            if fits(box, margin=0.05):
                agents.append(agent)
                placed.append(box)
                break

    movables: list[MovableObject] = []
    lo_m, hi_m = n_movable if n_movable is not None else cfg.n_movable
    for _ in range(int(rng.integers(lo_m, hi_m + 1))):
        for _ in range(cfg.max_tries):
            parts = _random_small_object(rng)
            r = cfg.movable_radius * np.sqrt(rng.random())
            phi = rng.uniform(0, 2 * np.pi)
            pos = np.array([r * np.cos(phi), r * np.sin(phi), rng.uniform(0.3, 1.9)])
            pose = RigidTransform(rot_z(rng.uniform(0, 360)), pos)
            box = _union_aabb([p.transformed(pose) for p in parts])
            if fits(box):
                movables.append(MovableObject(parts, pose))
                placed.append(box)
                break

    statics: list[StaticObject] = []
    n_f = int(rng.integers(cfg.n_furniture[0], cfg.n_furniture[1] + 1))
    for _ in range(n_f):
        for _ in range(cfg.max_tries):
            table = rng.random() < cfg.table_prob
            half = np.array([rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0.2, 0.55)])
            r = rng.uniform(cfg.furniture_min_radius + half[:2].max(), h - 0.05)
            phi = rng.uniform(0, 2 * np.pi)
            c = np.array([r * np.cos(phi), r * np.sin(phi), half[2]])
            rot = rot_z(rng.uniform(0, 360))
            parts = _table(c, half, rot) if table else [Box(c, half, rot)]
            bb = _union_aabb(parts)
            if not fits(bb):
                continue
            placed.append(bb)
            statics.append(StaticObject(parts))
            # clutter resting on top of the furniture piece
            for _ in range(int(rng.integers(0, 3))):
                top = c[2] + half[2]
                off = rng.uniform(-0.5, 0.5, size=2) * np.minimum(half[:2], 0.3)
                if rng.random() < 0.5:
                    rad = rng.uniform(0.06, 0.15)
                    item = Sphere(np.array([c[0] + off[0], c[1] + off[1], top + rad]), rad)
                else:
                    hh = rng.uniform(0.05, 0.15, size=3)
                    item = Box(np.array([c[0] + off[0], c[1] + off[1], top + hh[2]]), hh, rot_z(rng.uniform(0, 360)))
                ib = item.aabb()
                if fits(ib, margin=0.0):
                    statics.append(StaticObject([item]))
                    placed.append(ib)
            break

    # shallow boxes mounted on the walls (shelves, frames, radiators)
    n_p = int(rng.integers(cfg.n_wall_panels[0], cfg.n_wall_panels[1] + 1))
    for _ in range(n_p):
        for _ in range(cfg.max_tries):
            wall = int(rng.integers(4))
            along = rng.uniform(0.15, 0.6)
            vert = rng.uniform(0.1, 0.5)
            depth = rng.uniform(0.03, 0.15)
            u = rng.uniform(-h + along + 0.05, h - along - 0.05)
            z = rng.uniform(vert + 0.2, cfg.room_height - vert - 0.2)
            axis, sign = wall // 2, 1.0 if wall % 2 else -1.0
            c = np.zeros(3)
            c[axis] = sign * (h - depth)
            c[1 - axis] = u
            c[2] = z
            half = np.zeros(3)
            half[axis], half[1 - axis], half[2] = depth, along, vert
            panel = Box(c, half)
            if fits(panel.aabb(), margin=0.0):
                statics.append(StaticObject([panel]))
                placed.append(panel.aabb())
                break

    n_fl = int(rng.integers(cfg.n_floating[0], cfg.n_floating[1] + 1))
    for _ in range(n_fl):
        for _ in range(cfg.max_tries):
            rad = rng.uniform(0.15, 0.35)
            r = rng.uniform(cfg.furniture_min_radius + rad, h - rad - 0.05)
            phi = rng.uniform(0, 2 * np.pi)
            sph = Sphere(np.array([r * np.cos(phi), r * np.sin(phi), rng.uniform(1.2, cfg.room_height - 0.5)]), rad)
            if fits(sph.aabb()):
                statics.append(StaticObject([sph]))
                placed.append(sph.aabb())
                break

    return Scene(
        room, statics, movables, agents, center, rng_seed=seed,
        jitter_xy=cfg.jitter_xy, jitter_yaw_deg=cfg.jitter_yaw_deg,
    )

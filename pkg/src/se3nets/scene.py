"""Kinematic synthetic scenes rendered as organized point clouds.

World frame: z up, table top at z = 0. Camera frame: x right, y down, z along
the optical axis. Clouds, targets, actions and the per-label transforms stored
in a :class:`Frame` are all expressed in the camera frame, in meters.

Push scenes (n = 10): ``u = (ball position [m], ball orientation quaternion
(w, x, y, z), applied force [N])``. The ball does not spin, so the quaternion
is always the identity.

Arm scenes (n = 3): ``u`` holds the joint velocities [rad/s] of a planar
three-link arm.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .se3 import RigidTransform, compose, invert, rot_z

PUSH_N = 10
ARM_N = 3
ARM_LINKS = 3

BACKGROUND = 0
BALL = 1
PUSHED_BOX = 2

MAX_ATTEMPTS = 100


class GenerationError(RuntimeError):
    pass


@dataclass
class Camera:
    """Pinhole camera; ``rotation`` maps camera-frame vectors to world."""

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    position: np.ndarray
    rotation: np.ndarray

    @classmethod
    def looking_at(cls, position, target, height=32, width=40, fx=None, fy=None, cx=None, cy=None,
                   up=(0.0, 0.0, 1.0)):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)
        f = float(width) if fx is None else fx
        return cls(f, f if fy is None else fy, width / 2.0 if cx is None else cx,
                   height / 2.0 if cy is None else cy, height, width, position, rot)

    @classmethod
    def default(cls, height=32, width=40):
        return cls.looking_at((0.0, -0.55, 0.62), (0.0, 0.05, 0.0), height, width)

    def pose(self):
        """Camera-to-world transform."""
        return RigidTransform(self.rotation, self.position)

    def ray_directions(self):
        """Per-pixel camera-frame rays ``((u-cx)/fx, (v-cy)/fy, 1)``, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)

    def project(self, points):
        """Pixel coordinates ``(row, col)`` (float) and depth of camera-frame points."""
        z = points[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.fx * points[..., 0] / z + self.cx
            row = self.fy * points[..., 1] / z + self.cy
        return row, col, z

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "height": self.height,
                "width": self.width, "position": self.position.tolist(), "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["height"], d["width"],
                   np.asarray(d["position"], dtype=np.float64), np.asarray(d["rotation"], dtype=np.float64))


# --------------------------------------------------------------- primitives


def plane_prim(ident, z, xmin=-np.inf, xmax=np.inf, ymin=-np.inf, ymax=np.inf):
    row = np.zeros(kernels.PRIM_WIDTH)
    row[:7] = [kernels.PRIM_PLANE, ident, z, xmin, xmax, ymin, ymax]
    return row


def box_prim(ident, center, yaw, half):
    row = np.zeros(kernels.PRIM_WIDTH)
    row[:9] = [kernels.PRIM_BOX, ident, *center, yaw, *half]
    return row


def sphere_prim(ident, center, radius):
    row = np.zeros(kernels.PRIM_WIDTH)
    row[:6] = [kernels.PRIM_SPHERE, ident, *center, radius]
    return row


def project_to_grid(camera, prims, labels_of=None):
    """Ray cast every pixel against the primitives.

    Returns ``(cloud (H, W, 3), labels (H, W) uint8, valid (H, W) bool)``.
    ``labels_of`` maps primitive ids to output labels (default: identity).
    Pixels without a hit are invalid and carry the point ``(0, 0, 0)``.
    """
    dirs_cam = camera.ray_directions().reshape(-1, 3)
    dirs_world = np.ascontiguousarray(dirs_cam @ camera.rotation.T)
    depth, ids = kernels.raycast(np.ascontiguousarray(camera.position), dirs_world,
                                 np.ascontiguousarray(np.asarray(prims, dtype=np.float64)))
    valid = np.isfinite(depth)
    cloud = np.where(valid[:, None], dirs_cam * np.where(valid, depth, 0.0)[:, None], 0.0)
    if labels_of is None:
        labels = np.where(valid, ids, 0)
    else:
        labels = np.array([labels_of.get(int(i), 0) if v else 0 for i, v in zip(ids, valid)])
    h, w = camera.height, camera.width
    return cloud.reshape(h, w, 3), labels.reshape(h, w).astype(np.uint8), valid.reshape(h, w)


# ------------------------------------------------------------------- specs


@dataclass
class SceneSpec:
    family: str = "push"
    height: int = 32
    width: int = 40
    min_boxes: int = 1
    max_boxes: int = 3
    dt: float = 0.15
    alpha: float = 1.0        # box translation per unit force and second [m / (N s)]
    beta: float = 20.0        # box yaw rate per unit torque [rad / (N m s)]
    ball_gain: float = 1.25   # ball translation relative to the box rule
    ball_radius: float = 0.045
    force_range: tuple = (0.3, 1.0)
    joint_speed_range: tuple = (0.4, 1.5)
    min_background: float = 0.4
    camera: Camera = None

    def __post_init__(self):
        if self.family not in ("push", "arm"):
            raise ValueError(f"unknown scene family {self.family!r}")
        if self.camera is None:
            self.camera = Camera.default(self.height, self.width)

    @property
    def n(self):
        return PUSH_N if self.family == "push" else ARM_N

    @property
    def k_true_max(self):
        return 3 if self.family == "push" else 1 + ARM_LINKS

    def constants(self):
        return {"dt": self.dt, "alpha": self.alpha, "beta": self.beta, "ball_gain": self.ball_gain,
                "ball_radius": self.ball_radius, "force_range": list(self.force_range),
                "joint_speed_range": list(self.joint_speed_range), "min_boxes": self.min_boxes,
                "max_boxes": self.max_boxes, "min_background": self.min_background}


@dataclass
class Box:
    center: np.ndarray
    yaw: float
    half: np.ndarray


@dataclass
class PushScene:
    table_half: np.ndarray
    table_center: np.ndarray
    boxes: list
    ball_center: np.ndarray
    ball_radius: float
    force: np.ndarray            # world frame, horizontal
    camera: Camera
    pushed: int = -1
    contact: np.ndarray = None


@dataclass
class ArmScene:
    base: np.ndarray
    lengths: np.ndarray
    heights: np.ndarray
    half_width: float
    half_thickness: float
    q: np.ndarray
    qdot: np.ndarray
    table_half: np.ndarray
    table_center: np.ndarray
    camera: Camera


@dataclass
class Frame:
    """One example: input cloud, action, index-aligned target, labels, true transforms."""

    cloud: np.ndarray            # (H, W, 3)
    action: np.ndarray           # (n,)
    target: np.ndarray           # (H, W, 3)
    labels: np.ndarray           # (H, W) uint8
    valid: np.ndarray            # (H, W) bool
    transforms: np.ndarray = field(default_factory=lambda: np.zeros((1, 6)))  # (m, 6) axis-angle + t

    def transform(self, label):
        return RigidTransform.from_vector(self.transforms[label])


# ---------------------------------------------------------------- helpers


def _yaw_matrix(yaw):
    return rot_z(yaw)[:2, :2]


def _rect_distance(p_xy, box):
    """Distance from horizontal points to the box footprint, plus the closest footprint points."""
    rot = _yaw_matrix(box.yaw)
    local = (p_xy - box.center[:2]) @ rot
    clamped = np.clip(local, -box.half[:2], box.half[:2])
    dist = np.linalg.norm(local - clamped, axis=-1)
    return dist, clamped @ rot.T + box.center[:2]


def sweep_contact(start_xy, direction_xy, radius, box, horizon=0.3, step=5e-4):
    """First distance along the path at which a disc of ``radius`` touches the box footprint.

    Returns ``(s, contact_xy)`` or ``None`` if there is no contact within ``horizon``.
    """
    s = np.arange(0.0, horizon + step, step)
    pts = start_xy + s[:, None] * direction_xy
    dist, _ = _rect_distance(pts, box)
    touching = np.nonzero(dist <= radius)[0]
    if touching.size == 0:
        return None
    i = touching[0]
    if i == 0:
        _, contact = _rect_distance(start_xy[None], box)
        return 0.0, contact[0]
    lo, hi = s[i - 1], s[i]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        d, _ = _rect_distance((start_xy + mid * direction_xy)[None], box)
        if d[0] <= radius:
            hi = mid
        else:
            lo = mid
    _, contact = _rect_distance((start_xy + hi * direction_xy)[None], box)
    return hi, contact[0]


def to_camera_frame(camera, world_transform):
    """The world-frame motion ``world_transform`` expressed in camera coordinates."""
    pose = camera.pose()
    return compose(invert(pose), compose(world_transform, pose))


def _quantize(transform):
    """Round-trip through the stored 6-vector so targets match the file bit for bit."""
    vec = transform.to_vector()
    return vec, RigidTransform.from_vector(vec)


# ------------------------------------------------------------------ push


def _random_table(rng):
    return np.array([rng.uniform(0.45, 0.65), rng.uniform(0.35, 0.5)]), np.array([0.0, 0.05])


def _boxes_overlap(a_center, a_radius, others, margin=0.02):
    return any(np.linalg.norm(a_center[:2] - c[:2]) < a_radius + r + margin for c, r in others)


def generate_push_scene(spec, rng):
    """Random table, 1-3 boxes on it and a ball aimed to strike one of them."""
    for _ in range(MAX_ATTEMPTS):
        table_half, table_center = _random_table(rng)
        n_boxes = int(rng.integers(spec.min_boxes, spec.max_boxes + 1))
        boxes, placed = [], []
        for _ in range(50):
            if len(boxes) == n_boxes:
                break
            half = np.array([rng.uniform(0.05, 0.08), rng.uniform(0.05, 0.08), rng.uniform(0.04, 0.07)])
            center = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.12, 0.25), half[2]])
            radius = np.linalg.norm(half[:2])
            if _boxes_overlap(center, radius, placed):
                continue
            boxes.append(Box(center, float(rng.uniform(-np.pi, np.pi)), half))
            placed.append((center, radius))
        if len(boxes) != n_boxes:
            continue

        target = boxes[int(rng.integers(n_boxes))]
        phi = rng.uniform(-np.pi, np.pi)
        direction = np.array([np.cos(phi), np.sin(phi)])
        perp = np.array([-direction[1], direction[0]])
        reach = np.linalg.norm(target.half[:2]) + spec.ball_radius + rng.uniform(0.01, 0.08)
        offset = rng.uniform(-1.0, 1.0) * 0.8 * target.half[:2].min()
        ball_xy = target.center[:2] - reach * direction + offset * perp
        if not (-0.35 <= ball_xy[0] <= 0.35 and -0.22 <= ball_xy[1] <= 0.4):
            continue
        if np.any(np.abs(ball_xy - table_center) > table_half - spec.ball_radius):
            continue
        if any(_rect_distance(ball_xy[None], b)[0][0] <= spec.ball_radius + 0.005 for b in boxes):
            continue
        delta = rng.uniform(-0.15, 0.15)
        fdir = rot_z(delta)[:2, :2] @ direction
        magnitude = rng.uniform(*spec.force_range)
        force = np.array([fdir[0], fdir[1], 0.0]) * magnitude
        scene = PushScene(table_half, table_center, boxes, np.array([ball_xy[0], ball_xy[1], spec.ball_radius]),
                          spec.ball_radius, force, spec.camera)
        if _first_contact(scene) is None:
            continue
        return scene, push_action(scene)
    raise GenerationError(f"no colliding push scene after {MAX_ATTEMPTS} attempts")


def push_action(scene):
    cam_inv = invert(scene.camera.pose())
    ball_cam = cam_inv.apply(scene.ball_center)
    force_cam = cam_inv.rotation @ scene.force
    return np.concatenate([ball_cam, [1.0, 0.0, 0.0, 0.0], force_cam])


def _first_contact(scene):
    f_xy = scene.force[:2]
    mag = np.linalg.norm(f_xy)
    if mag == 0.0:
        return None
    direction = f_xy / mag
    best = None
    for i, box in enumerate(scene.boxes):
        hit = sweep_contact(scene.ball_center[:2], direction, scene.ball_radius, box)
        if hit is not None and (best is None or hit[0] < best[0]):
            best = (hit[0], i, hit[1])
    return best


def box_push_transform(box, contact_xy, force, alpha, beta, dt):
    """World-frame motion of a pushed box.

    Translation follows the in-plane force, yaw follows the torque of that
    force about the box center through the contact point.
    """
    f_xy = np.asarray(force, dtype=np.float64)[:2]
    lever = np.asarray(contact_xy) - box.center[:2]
    torque = lever[0] * f_xy[1] - lever[1] * f_xy[0]
    yaw = beta * torque * dt
    rot = rot_z(yaw)
    shift = alpha * np.array([f_xy[0], f_xy[1], 0.0]) * dt
    return RigidTransform(rot, box.center - rot @ box.center + shift)


def step_dynamics(scene, u=None, dt=0.15, alpha=1.0, beta=20.0, ball_gain=1.25):
    """Per-object world-frame transforms over ``dt``.

    Returns ``{"ball": T, "boxes": [T, ...]}``; only the first box hit by the
    ball moves. ``u`` (camera-frame action) overrides the scene's force when
    given.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if u is not None:
        scene.force = scene.camera.rotation @ np.asarray(u, dtype=np.float64)[7:10]
    identity = RigidTransform.identity()
    boxes = [identity for _ in scene.boxes]
    force = scene.force
    if not np.any(force):
        scene.pushed, scene.contact = -1, None
        return {"ball": identity, "boxes": boxes}
    ball = RigidTransform(np.eye(3), ball_gain * alpha * np.array([force[0], force[1], 0.0]) * dt)
    hit = _first_contact(scene)
    if hit is None:
        scene.pushed, scene.contact = -1, None
    else:
        _, idx, contact = hit
        scene.pushed, scene.contact = idx, contact
        boxes[idx] = box_push_transform(scene.boxes[idx], contact, force, alpha, beta, dt)
    return {"ball": ball, "boxes": boxes}


def _push_prims(scene):
    prims = [plane_prim(0, -0.75),
             plane_prim(1, 0.0, scene.table_center[0] - scene.table_half[0], scene.table_center[0] + scene.table_half[0],
                        scene.table_center[1] - scene.table_half[1], scene.table_center[1] + scene.table_half[1]),
             sphere_prim(2, scene.ball_center, scene.ball_radius)]
    for i, b in enumerate(scene.boxes):
        prims.append(box_prim(3 + i, b.center, b.yaw, b.half))
    return np.array(prims)


def render_push_frame(scene, spec):
    motions = step_dynamics(scene, None, spec.dt, spec.alpha, spec.beta, spec.ball_gain)
    labels_of = {0: BACKGROUND, 1: BACKGROUND, 2: BALL}
    for i in range(len(scene.boxes)):
        labels_of[3 + i] = PUSHED_BOX if i == scene.pushed else BACKGROUND
    cloud, labels, valid = project_to_grid(scene.camera, _push_prims(scene), labels_of)
    world = [RigidTransform.identity(), motions["ball"],
             motions["boxes"][scene.pushed] if scene.pushed >= 0 else RigidTransform.identity()]
    return _finish_frame(scene.camera, cloud, labels, valid, world, push_action(scene))


# ------------------------------------------------------------------- arm


def arm_link_poses(base, lengths, q):
    """World-frame poses (yaw rotation, center) of each link box of a planar arm."""
    poses = []
    origin = np.asarray(base[:2], dtype=np.float64)
    heading = 0.0
    for length, angle in zip(lengths, q):
        heading += angle
        axis = np.array([np.cos(heading), np.sin(heading)])
        center = origin + 0.5 * length * axis
        poses.append((heading, center))
        origin = origin + length * axis
    return poses


def generate_arm_scene(spec, rng):
    """Planar three-link arm over a table with 1-3 joints driven at constant speed."""
    table_half, table_center = _random_table(rng)
    q = np.array([rng.uniform(0.6, 2.5), rng.uniform(-1.2, 1.2), rng.uniform(-1.2, 1.2)])
    qdot = np.zeros(ARM_LINKS)
    moving = rng.choice(ARM_LINKS, size=int(rng.integers(1, ARM_LINKS + 1)), replace=False)
    lo, hi = spec.joint_speed_range
    qdot[moving] = rng.uniform(lo, hi, size=moving.size) * rng.choice([-1.0, 1.0], size=moving.size)
    scene = ArmScene(np.array([0.0, -0.12]), np.array([0.16, 0.14, 0.12]), np.array([0.06, 0.11, 0.16]),
                     0.03, 0.02, q, qdot, table_half, table_center, spec.camera)
    return scene, qdot.copy()


def arm_transforms(scene, u=None, dt=0.15):
    """World-frame motion of each link after driving the joints at ``u`` for ``dt``."""
    qdot = scene.qdot if u is None else np.asarray(u, dtype=np.float64)
    before = arm_link_poses(scene.base, scene.lengths, scene.q)
    after = arm_link_poses(scene.base, scene.lengths, scene.q + qdot * dt)
    out = []
    for (y0, c0), (y1, c1), z in zip(before, after, scene.heights):
        p0 = RigidTransform(rot_z(y0), [c0[0], c0[1], z])
        p1 = RigidTransform(rot_z(y1), [c1[0], c1[1], z])
        out.append(compose(p1, invert(p0)))
    return out


def render_arm_frame(scene, spec):
    prims = [plane_prim(0, -0.75),
             plane_prim(1, 0.0, scene.table_center[0] - scene.table_half[0], scene.table_center[0] + scene.table_half[0],
                        scene.table_center[1] - scene.table_half[1], scene.table_center[1] + scene.table_half[1])]
    for i, (yaw, center) in enumerate(arm_link_poses(scene.base, scene.lengths, scene.q)):
        half = (0.5 * scene.lengths[i], scene.half_width, scene.half_thickness)
        prims.append(box_prim(2 + i, (center[0], center[1], scene.heights[i]), yaw, half))
    labels_of = {0: BACKGROUND, 1: BACKGROUND}
    labels_of.update({2 + i: 1 + i for i in range(ARM_LINKS)})
    cloud, labels, valid = project_to_grid(scene.camera, np.array(prims), labels_of)
    world = [RigidTransform.identity()] + arm_transforms(scene, None, spec.dt)
    return _finish_frame(scene.camera, cloud, labels, valid, world, scene.qdot.copy())


# ---------------------------------------------------------------- frames


def _finish_frame(camera, cloud, labels, valid, world_transforms, action):
    vectors = []
    targets = np.zeros_like(cloud)
    for label, wt in enumerate(world_transforms):
        if label == BACKGROUND:
            vec, cam_t = np.zeros(6), RigidTransform.identity()
        else:
            vec, cam_t = _quantize(to_camera_frame(camera, wt))
        vectors.append(vec)
        sel = valid & (labels == label)
        targets[sel] = cam_t.apply(cloud[sel])
    return Frame(cloud, np.asarray(action, dtype=np.float64), targets, labels, valid, np.array(vectors))


def generate_frame(spec, rng):
    """Sample and render one frame, resampling until the background covers enough pixels."""
    for _ in range(MAX_ATTEMPTS):
        if spec.family == "push":
            scene, _ = generate_push_scene(spec, rng)
            frame = render_push_frame(scene, spec)
        else:
            scene, _ = generate_arm_scene(spec, rng)
            frame = render_arm_frame(scene, spec)
        n_valid = frame.valid.sum()
        if n_valid and (frame.labels[frame.valid] == BACKGROUND).sum() >= spec.min_background * n_valid:
            return frame
    raise GenerationError("could not satisfy the background coverage constraint")


# ---------------------------------------------------------------- noise


def add_depth_noise(frame, sd, depth_scaled=False, seed=0, reference_depth=1.0):
    """Gaussian perturbation of the input points along their camera rays.

    With ``depth_scaled`` the standard deviation grows linearly with depth
    (``sd * z / reference_depth``). Only the input cloud changes.
    """
    if sd < 0:
        raise ValueError("sd must be >= 0")
    if sd == 0:
        return frame
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, size=frame.valid.shape) * sd
    pts = frame.cloud
    if depth_scaled:
        eps = eps * pts[..., 2] / reference_depth
    norm = np.linalg.norm(pts, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ray = np.where(norm[..., None] > 0, pts / norm[..., None], 0.0)
    noisy = np.where(frame.valid[..., None], pts + eps[..., None] * ray, pts)
    return Frame(noisy, frame.action, frame.target, frame.labels, frame.valid, frame.transforms)


def association_uniforms(shape, seed):
    return np.random.default_rng(seed).random(shape)


def corrupt_associations(frame, window, depth_threshold, seed=0):
    """Re-associate each target with a random nearby pixel of similar input depth.

    The candidate set for pixel j is every valid pixel in the ``window x
    window`` neighbourhood (clipped at the borders) whose input depth differs
    from j's by at most ``depth_threshold``; j itself is always a candidate.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be an odd integer >= 1")
    if window == 1:
        return frame
    u = association_uniforms(frame.valid.shape, seed)
    target = kernels.corrupt_associations_kernel(
        np.ascontiguousarray(frame.cloud[..., 2]), np.ascontiguousarray(frame.valid),
        np.ascontiguousarray(frame.target), u, int(window), float(depth_threshold))
    return Frame(frame.cloud, frame.action, target, frame.labels, frame.valid, frame.transforms)

"""Analytic time-varying scenes with closed-form ground-truth lighting.

A scene is a box room containing spherical emitters (with temporal on/off
profiles) under a vertical ambient gradient. Visibility is a ray-sphere test,
so the true light field at any (x, t, d) is exact; these scenes drive the
synthetic prior oracle and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .configio import check_keys
from .envmap import EnvMap, pixel_center_directions
from .errors import ConfigError, DataValidationError
from .imagehdr import HdrImage, LdrImage, tonemap_array
from .probe import Camera, DepthMap

UP = np.array([0.0, 1.0, 0.0])

PROFILE_KINDS = ("constant", "step", "fade")


@dataclass(frozen=True)
class TemporalProfile:
    """Emitter intensity multiplier over frame index: always within [0, 1]."""

    kind: str = "constant"
    t0: float = 0.0
    t1: float = 0.0

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ConfigError(f"profile kind {self.kind!r} not one of {PROFILE_KINDS}")
        if self.kind != "constant" and not self.t1 > self.t0:
            raise ConfigError("profile: t1 must exceed t0")

    def multiplier(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return np.ones_like(t)
        if self.kind == "step":
            return ((t >= self.t0) & (t < self.t1)).astype(np.float64)
        # fade: full before t0, linear ramp down to zero at t1
        ramp = np.clip((self.t1 - t) / (self.t1 - self.t0), 0.0, 1.0)
        return np.where(t < self.t0, 1.0, ramp)


@dataclass(frozen=True)
class Emitter:
    center: np.ndarray
    radius: float
    radiance: np.ndarray
    profile: TemporalProfile = field(default_factory=TemporalProfile)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        rad = np.asarray(self.radiance, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise DataValidationError("Emitter: radius must be positive")
        if (rad < 0).any():
            raise DataValidationError("Emitter: radiance must be non-negative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radiance", rad)


@dataclass(frozen=True)
class Room:
    box_min: np.ndarray
    box_max: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.box_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.box_max, dtype=np.float64).reshape(3)
        alb = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if not (hi > lo).all():
            raise DataValidationError("Room: box_max must exceed box_min")
        if (alb < 0).any() or (alb > 1).any():
            raise DataValidationError("Room: albedo must be in [0, 1]")
        object.__setattr__(self, "box_min", lo)
        object.__setattr__(self, "box_max", hi)
        object.__setattr__(self, "albedo", alb)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform: yaw about +Y plus a translation."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_deg: float = 0.0

    def rotation(self) -> np.ndarray:
        a = np.deg2rad(self.yaw_deg)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def transform_points(self, p: np.ndarray) -> np.ndarray:
        return p @ self.rotation().T + np.asarray(self.position)

    def transform_dirs(self, d: np.ndarray) -> np.ndarray:
        return d @ self.rotation().T

    @property
    def is_identity(self) -> bool:
        return self.yaw_deg == 0.0 and not np.any(np.asarray(self.position))


@dataclass(frozen=True)
class SceneSpec:
    emitters: tuple[Emitter, ...]
    room: Room
    camera: Camera
    frame_count: int = 1
    ambient_top: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.32, 0.36]))
    ambient_bottom: np.ndarray = field(default_factory=lambda: np.array([0.12, 0.1, 0.08]))
    camera_path: tuple[Pose, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "emitters", tuple(self.emitters))
        object.__setattr__(self, "camera_path", tuple(self.camera_path))
        top = np.asarray(self.ambient_top, dtype=np.float64).reshape(3)
        bot = np.asarray(self.ambient_bottom, dtype=np.float64).reshape(3)
        object.__setattr__(self, "ambient_top", top)
        object.__setattr__(self, "ambient_bottom", bot)
        if self.frame_count < 1:
            raise DataValidationError("SceneSpec: frame_count must be >= 1")
        nonzero = any(e.radiance.any() for e in self.emitters) or top.any() or bot.any()
        if not nonzero:
            raise DataValidationError("SceneSpec: scene has no light source")
        if self.camera_path and len(self.camera_path) != self.frame_count:
            raise ConfigError("SceneSpec: camera_path length must equal frame_count")

    def pose(self, t: int) -> Pose:
        if not self.camera_path:
            return Pose()
        return self.camera_path[int(t) - 1]

    @property
    def is_static(self) -> bool:
        return all(p.is_identity for p in self.camera_path)


def ambient_radiance(scene: SceneSpec, d: np.ndarray) -> np.ndarray:
    """Vertical gradient: bottom color at d = -Y blending to top color at +Y."""
    w = (np.asarray(d, dtype=np.float64) @ UP + 1.0) * 0.5
    return scene.ambient_bottom + w[..., None] * (scene.ambient_top - scene.ambient_bottom)


def _emitter_hits(scene: SceneSpec, x: np.ndarray, d: np.ndarray):
    """Per emitter, nearest positive hit distance (inf if missed)."""
    ts = []
    for e in scene.emitters:
        oc = e.center - x
        b = (d * oc).sum(axis=-1)
        disc = b * b - ((oc * oc).sum(axis=-1) - e.radius * e.radius)
        ok = disc >= 0.0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t_near = b - root
        t_far = b + root
        t = np.where(t_near > 1e-9, t_near, t_far)  # inside an emitter: far hit
        ts.append(np.where(ok & (t > 1e-9), t, np.inf))
    return ts


def gt_radiance(scene: SceneSpec, x: np.ndarray, t, d: np.ndarray) -> np.ndarray:
    """Exact L(x, t, d): nearest emitter hit crossfades its radiance with the
    ambient gradient by the temporal multiplier (a fully-off emitter is
    invisible, not a black occluder); ambient where no emitter is hit."""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    x, d = np.broadcast_arrays(x, d)
    out = ambient_radiance(scene, d).copy()
    if not scene.emitters:
        return out
    hits = np.stack(_emitter_hits(scene, x, d))
    nearest = hits.argmin(axis=0)
    hit_any = np.isfinite(hits.min(axis=0))
    for i, e in enumerate(scene.emitters):
        sel = hit_any & (nearest == i)
        if np.any(sel):
            m = float(e.profile.multiplier(t))
            out[sel] = m * e.radiance + (1.0 - m) * out[sel]
    return out


def gt_envmap(scene: SceneSpec, x: np.ndarray, t, height: int) -> EnvMap:
    """Ground-truth environment map at world position x and frame t."""
    dirs = pixel_center_directions(height)
    rgb = gt_radiance(scene, np.asarray(x, dtype=np.float64), t, dirs)
    return EnvMap(HdrImage(rgb.astype(np.float32)))


def _wall_radiance(scene: SceneSpec, p: np.ndarray, n: np.ndarray, t) -> np.ndarray:
    """Direct one-bounce Lambertian shading of a wall point.

    Ambient gradient integrates in closed form (linear in n . up); each emitter
    adds the exact disk-equivalent irradiance of a sphere fully above the
    horizon, pi * (r/D)^2 * cos, with the crossfaded ambient it replaces
    subtracted so the sum equals the hemisphere integral of gt_radiance.
    """
    alb = scene.room.albedo
    irr = np.zeros(p.shape[:-1] + (3,))
    for e in scene.emitters:
        to_e = e.center - p
        dist = np.linalg.norm(to_e, axis=-1)
        dist = np.maximum(dist, e.radius + 1e-9)
        cos = np.maximum((to_e * n).sum(axis=-1) / dist, 0.0)
        geom = np.pi * (e.radius / dist) ** 2 * cos
        amb_behind = ambient_radiance(scene, to_e / dist[..., None])
        m = float(e.profile.multiplier(t))
        irr += geom[..., None] * m * (e.radiance - amb_behind)
    mean_amb = 0.5 * (scene.ambient_top + scene.ambient_bottom)
    grad_amb = 0.5 * (scene.ambient_top - scene.ambient_bottom)
    n_up = (n @ UP)[..., None]
    irr += np.pi * mean_amb + (2.0 * np.pi / 3.0) * n_up * grad_amb
    return alb / np.pi * np.clip(irr, 0.0, None)


def render_background(
    scene: SceneSpec, camera: Camera, t: int
) -> tuple[LdrImage, DepthMap, HdrImage]:
    """Rasterize the box room (plus visible emitters) for frame t.

    Returns the tonemapped LDR frame (ev = 0), the exact depth map, and the
    underlying HDR radiance.
    """
    pose = scene.pose(t)
    h, w = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = camera.ray_dirs(uu.ravel(), vv.ravel())
    dirs = pose.transform_dirs(dirs_cam)
    origin = np.asarray(pose.position, dtype=np.float64)
    if not ((scene.room.box_min < origin).all() and (origin < scene.room.box_max).all()):
        raise DataValidationError("render_background: camera must be inside the room box")

    # Exit distance of each ray from the interior of the box.
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (scene.room.box_max - origin) / dirs
        t_lo = (scene.room.box_min - origin) / dirs
    t_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    exit_axis = t_axis.argmin(axis=1)
    t_exit = t_axis.min(axis=1)
    p = origin + dirs * t_exit[:, None]
    normal = np.zeros_like(p)
    rows = np.arange(len(p))
    normal[rows, exit_axis] = -np.sign(dirs[rows, exit_axis])
    radiance = _wall_radiance(scene, p, normal, t)
    depth = t_exit * dirs_cam[:, 2]

    if scene.emitters:
        hits = np.stack(_emitter_hits(scene, origin, dirs))
        nearest = hits.argmin(axis=0)
        t_emit = hits.min(axis=0)
        direct = t_emit < t_exit
        for i, e in enumerate(scene.emitters):
            sel = direct & (nearest == i)
            if np.any(sel):
                radiance[sel] = e.radiance * e.profile.multiplier(t)
        depth = np.where(direct, t_emit * dirs_cam[:, 2], depth)

    hdr = radiance.reshape(h, w, 3)
    ldr = tonemap_array(hdr, ev=0.0)
    return (
        LdrImage(ldr.astype(np.float32)),
        DepthMap(depth.reshape(h, w)),
        HdrImage(hdr.astype(np.float32)),
    )


# -- JSON wiring ------------------------------------------------------------


def scene_from_json(doc: dict) -> tuple[SceneSpec, list[dict]]:
    """Parse a scene document; returns the spec and the listed (x, t) probes."""
    check_keys(
        doc,
        {"frames", "camera", "room", "ambient", "emitters", "camera_path", "probes"},
        "scene",
    )
    cam = Camera.from_json(doc["camera"])
    room_doc = doc.get("room", {})
    check_keys(room_doc, {"min", "max", "albedo"}, "scene.room")
    room = Room(
        box_min=np.array(room_doc.get("min", [-4.0, -2.0, -1.0])),
        box_max=np.array(room_doc.get("max", [4.0, 3.0, 8.0])),
        albedo=np.array(room_doc.get("albedo", [0.6, 0.58, 0.55])),
    )
    amb = doc.get("ambient", {})
    check_keys(amb, {"top", "bottom"}, "scene.ambient")
    emitters = []
    for i, ed in enumerate(doc.get("emitters", [])):
        check_keys(ed, {"center", "radius", "radiance", "profile"}, f"scene.emitters[{i}]")
        pd = ed.get("profile", {})
        check_keys(pd, {"kind", "t0", "t1"}, f"scene.emitters[{i}].profile")
        profile = TemporalProfile(
            kind=pd.get("kind", "constant"), t0=pd.get("t0", 0.0), t1=pd.get("t1", 0.0)
        )
        emitters.append(
            Emitter(
                center=np.array(ed["center"]),
                radius=float(ed["radius"]),
                radiance=np.array(ed["radiance"]),
                profile=profile,
            )
        )
    path = []
    for i, pd in enumerate(doc.get("camera_path", [])):
        check_keys(pd, {"position", "yaw_deg"}, f"scene.camera_path[{i}]")
        path.append(Pose(position=np.array(pd.get("position", [0, 0, 0]), dtype=np.float64),
                         yaw_deg=float(pd.get("yaw_deg", 0.0))))
    scene = SceneSpec(
        emitters=tuple(emitters),
        room=room,
        camera=cam,
        frame_count=int(doc.get("frames", 1)),
        ambient_top=np.array(amb.get("top", [0.3, 0.32, 0.36])),
        ambient_bottom=np.array(amb.get("bottom", [0.12, 0.1, 0.08])),
        camera_path=tuple(path),
    )
    probes = list(doc.get("probes", []))
    for i, pr in enumerate(probes):
        check_keys(pr, {"x", "t"}, f"scene.probes[{i}]")
    return scene, probes

"""Chrome-ball light probes: placement, projection, mirror rendering, compositing,
and unwrapping a ball image back into an environment map.

The camera sits at the origin of its own frame looking along +Z with +X right;
image rows grow downward, so pixel (u, v) casts the ray
normalize(((u-cx)/fx, -(v-cy)/fy, 1)) and image-up coincides with +Y. Balls are
perfect mirrors; shading is a single reflection lookup into an environment map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import envmap as em
from .errors import DataValidationError
from .imagehdr import HdrImage

NEAR_PLANE = 0.01


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (zero skew) and sensor size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataValidationError("Camera: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DataValidationError("Camera: principal point outside the sensor")

    def ray_dirs(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit camera-space ray directions through continuous pixel coords."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx
        y = -(np.asarray(v, dtype=np.float64) - self.cy) / self.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Camera-space points (..., 3) -> continuous pixel coords."""
        p = np.asarray(p, dtype=np.float64)
        z = p[..., 2]
        u = self.cx + self.fx * p[..., 0] / z
        v = self.cy - self.fy * p[..., 1] / z
        return u, v

    def unproject(self, u, v, z) -> np.ndarray:
        """Pixel coords and z-depth -> camera-space point."""
        z = np.asarray(z, dtype=np.float64)
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx * z
        y = -(np.asarray(v, dtype=np.float64) - self.cy) / self.fy * z
        return np.stack([x, y, z], axis=-1)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "w": self.width, "h": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=int(d["w"]), height=int(d["h"]))


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel metric depth along camera +Z; finite and positive."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise DataValidationError(f"DepthMap: expected (H, W), got {arr.shape}")
        if not np.isfinite(arr).all() or (arr <= 0).any():
            raise DataValidationError("DepthMap: depths must be finite and positive")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class Ball:
    """Mirror sphere in camera space: center (z > 0) and radius in meters."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise DataValidationError("Ball: radius must be positive")
        if c[2] - self.radius <= NEAR_PLANE:
            raise DataValidationError("Ball: sphere crosses the near plane")
        object.__setattr__(self, "center", c)


@dataclass(frozen=True)
class ProbeSet:
    """Balls plus the camera and background depth they are embedded in."""

    balls: tuple[Ball, ...]
    camera: Camera
    background_depth: DepthMap

    def __post_init__(self):
        object.__setattr__(self, "balls", tuple(self.balls))
        dm = self.background_depth.data
        if dm.shape != (self.camera.height, self.camera.width):
            raise DataValidationError("ProbeSet: depth map does not match camera size")
        for b in self.balls:
            u, v = self.camera.project(b.center)
            if not (0 <= u < self.camera.width and 0 <= v < self.camera.height):
                raise DataValidationError("ProbeSet: ball center outside the view frustum")


def size_ball(camera: Camera, center: np.ndarray) -> float:
    """Radius making the projected diameter about 1/4 of the image size."""
    c = np.asarray(center, dtype=np.float64).reshape(3)
    if c[2] <= 0:
        raise DataValidationError("size_ball: ball center behind the camera")
    return float(min(camera.width, camera.height) / 8.0 * c[2] / camera.fx)


def reflect(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Mirror v about the plane with normal n: v - 2 (v.n) n."""
    dot = (v * n).sum(axis=-1, keepdims=True)
    return v - 2.0 * dot * n


def _ray_sphere(dirs: np.ndarray, center: np.ndarray, radius: float):
    """Nearest intersection of origin rays with a sphere; (t, hit mask)."""
    b = dirs @ center
    disc = b * b - (center @ center - radius * radius)
    hit = (disc >= 0.0) & (b > 0.0)
    t = b - np.sqrt(np.where(hit, disc, 0.0))
    return np.where(hit, t, np.inf), hit


def project_mask_and_depth(probes: ProbeSet) -> tuple[np.ndarray, DepthMap]:
    """Ball inpainting mask and depth with balls composited over the background.

    Mask is True where a ball surface is the nearest thing along the pixel's
    center ray; composited depth is min(nearest ball hit, background).
    """
    cam = probes.camera
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs = cam.ray_dirs(uu.ravel(), vv.ravel())
    nearest = np.full(h * w, np.inf)
    for ball in probes.balls:
        t, hit = _ray_sphere(dirs, ball.center, ball.radius)
        z = np.where(hit, t * dirs[:, 2], np.inf)
        nearest = np.minimum(nearest, z)
    bg = probes.background_depth.data.ravel()
    mask = nearest < bg
    depth = np.minimum(nearest, bg)
    return mask.reshape(h, w), DepthMap(depth.reshape(h, w))


@dataclass
class SpriteLookup:
    """Sparse record of every env-map tap behind a sprite pixel.

    rgb.reshape(-1, 3)[pixel] == sum over taps of weight * env_flat[texel];
    this is what makes the rendering exactly differentiable w.r.t. the map.
    """

    pixel: np.ndarray   # (K,) flat index into the sprite bbox
    texel: np.ndarray   # (K,) flat index into the env grid
    weight: np.ndarray  # (K,) float64

    def scatter_env_grad(self, pixel_grad: np.ndarray, env_size: int) -> np.ndarray:
        """Accumulate d loss / d env_flat from d loss / d sprite rgb (N, 3)."""
        grad = np.zeros((env_size, 3), dtype=np.float64)
        np.add.at(grad, self.texel, self.weight[:, None] * pixel_grad[self.pixel])
        return grad


@dataclass
class Sprite:
    """Axis-aligned screen-space patch produced by rendering one ball."""

    x0: int
    y0: int
    rgb: np.ndarray      # (bh, bw, 3), mean mirror color over covering subrays
    alpha: np.ndarray    # (bh, bw) coverage fraction in [0, 1]
    zdepth: np.ndarray   # (bh, bw) mean hit depth; +inf where alpha == 0
    lookup: SpriteLookup | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


def _ball_bbox(ball: Ball, camera: Camera, pad: int = 2) -> tuple[int, int, int, int]:
    """Conservative pixel bbox of the sphere silhouette (cone-boundary sampling)."""
    c = ball.center
    dist = float(np.linalg.norm(c))
    axis = c / dist
    alpha = np.arcsin(ball.radius / dist)
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(axis, ref)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    t = np.linspace(0.0, 2.0 * np.pi, 256, endpoint=False)
    rim = (
        np.cos(alpha) * axis[None, :]
        + np.sin(alpha) * (np.cos(t)[:, None] * b1[None, :] + np.sin(t)[:, None] * b2[None, :])
    )
    u, v = camera.project(rim * dist)  # points on the cone at the center's range
    x0 = int(np.floor(u.min())) - pad
    x1 = int(np.ceil(u.max())) + pad
    y0 = int(np.floor(v.min())) - pad
    y1 = int(np.ceil(v.max())) + pad
    x0 = max(x0, 0)
    y0 = max(y0, 0)
    x1 = min(x1, camera.width)
    y1 = min(y1, camera.height)
    if x1 <= x0 or y1 <= y0:
        raise DataValidationError("render_ball: ball projects outside the frame")
    return x0, y0, x1, y1


def render_ball_grid(
    env_data: np.ndarray,
    ball: Ball,
    camera: Camera,
    supersample: int = 4,
    record: bool = False,
) -> Sprite:
    """Render one mirror ball under an (H, 2H, 3) radiance grid.

    Each bbox pixel is covered by supersample^2 regular subrays; pixel color is
    the mean environment lookup over the subrays that hit the sphere and alpha
    is the fraction that hit. With record=True the sprite carries the bilinear
    tap list for gradient propagation.
    """
    if supersample < 1:
        raise DataValidationError("render_ball: supersample must be >= 1")
    env_h, env_w = env_data.shape[:2]
    x0, y0, x1, y1 = _ball_bbox(ball, camera)
    bw, bh = x1 - x0, y1 - y0
    s = supersample
    off = (np.arange(s) + 0.5) / s
    px, py = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    u = px[..., None, None] + off[None, None, :, None]
    v = py[..., None, None] + off[None, None, None, :]
    u, v = np.broadcast_arrays(u, v)
    dirs = camera.ray_dirs(u.ravel(), v.ravel())
    t, hit = _ray_sphere(dirs, ball.center, ball.radius)

    n_px = bh * bw
    sub_pixel = np.repeat(np.arange(n_px), s * s)
    hit_pixel = sub_pixel[hit]
    counts = np.bincount(hit_pixel, minlength=n_px)

    p = dirs[hit] * t[hit][:, None]
    n = (p - ball.center[None, :]) / ball.radius
    omega = reflect(dirs[hit], n)
    eu, ev_ = em.dir_to_pixel(omega, env_h)
    idx, wts = em.bilinear_setup(eu, ev_, env_h, env_w)

    flat = env_data.reshape(env_h * env_w, 3)
    colors = (flat[idx].astype(np.float64) * wts[..., None]).sum(axis=-2)

    rgb = np.zeros((n_px, 3))
    np.add.at(rgb, hit_pixel, colors)
    zsum = np.zeros(n_px)
    np.add.at(zsum, hit_pixel, p[:, 2])
    covered = counts > 0
    rgb[covered] /= counts[covered, None]
    zdepth = np.full(n_px, np.inf)
    zdepth[covered] = zsum[covered] / counts[covered]
    alpha = counts / float(s * s)

    lookup = None
    if record:
        inv = np.zeros(n_px)
        inv[covered] = 1.0 / counts[covered]
        lookup = SpriteLookup(
            pixel=np.repeat(hit_pixel, 4),
            texel=idx.ravel(),
            weight=(wts * inv[hit_pixel][:, None]).ravel(),
        )
    return Sprite(
        x0=x0,
        y0=y0,
        rgb=rgb.reshape(bh, bw, 3).astype(env_data.dtype),
        alpha=alpha.reshape(bh, bw),
        zdepth=zdepth.reshape(bh, bw),
        lookup=lookup,
    )


def render_ball(env: em.EnvMap, ball: Ball, camera: Camera, supersample: int = 4) -> Sprite:
    """Mirror-ball sprite under an environment map (RGB + coverage alpha)."""
    return render_ball_grid(env.data, ball, camera, supersample=supersample)


@dataclass
class CompositeResult:
    image: np.ndarray    # (H, W, 3) composited frame
    weights: np.ndarray  # (n_sprites, H, W): d image / d sprite rgb


def composite_arrays(
    frame: np.ndarray,
    sprites: list[Sprite],
    background_depth: np.ndarray | None = None,
) -> CompositeResult:
    """Depth-ordered alpha compositing of ball sprites over a frame.

    Per pixel the nearest sprite wins; sprites behind the background depth are
    occluded. The returned weights give each sprite's linear contribution to
    every pixel, for the backward pass.
    """
    h, w = frame.shape[:2]
    n = len(sprites)
    out = frame.astype(np.float64).copy()
    weights = np.zeros((max(n, 1), h, w))
    if n == 0:
        return CompositeResult(image=out.astype(frame.dtype), weights=weights[:0])

    alpha = np.zeros((n, h, w))
    depth = np.full((n, h, w), np.inf)
    color = np.zeros((n, h, w, 3))
    for i, sp in enumerate(sprites):
        bh, bw = sp.shape
        if sp.x0 + bw > w or sp.y0 + bh > h:
            raise DataValidationError("composite: sprite exceeds frame bounds")
        sl = (i, slice(sp.y0, sp.y0 + bh), slice(sp.x0, sp.x0 + bw))
        alpha[sl] = sp.alpha
        depth[sl] = sp.zdepth
        color[sl] = sp.rgb
    if background_depth is not None:
        occluded = depth > background_depth[None, :, :]
        alpha[occluded] = 0.0

    order = np.argsort(depth, axis=0)  # nearest sprite first, per pixel
    transmit = np.ones((h, w))
    acc = np.zeros((h, w, 3))
    for k in range(n):
        sel = order[k]
        a = np.take_along_axis(alpha, sel[None], axis=0)[0]
        c = np.take_along_axis(color, sel[None, ..., None], axis=0)[0]
        contrib = transmit * a
        acc += contrib[..., None] * c
        np.put_along_axis(weights, sel[None], contrib[None], axis=0)
        transmit = transmit * (1.0 - a)
    out = acc + transmit[..., None] * out
    return CompositeResult(image=out.astype(frame.dtype), weights=weights)


def composite(frame, sprites: list[Sprite], background_depth: DepthMap | None = None):
    """Public compositing entry point; accepts HdrImage/LdrImage/array frames."""
    from .imagehdr import HdrImage, LdrImage

    if isinstance(frame, (HdrImage, LdrImage)):
        data = frame.data
    else:
        data = np.asarray(frame)
    bg = background_depth.data if background_depth is not None else None
    result = composite_arrays(data, sprites, bg)
    if isinstance(frame, LdrImage):
        return LdrImage(np.clip(result.image, 0.0, 1.0))
    if isinstance(frame, HdrImage):
        return HdrImage(result.image)
    return result.image


def _unwrap_angle_of(gamma: np.ndarray, dist: float, radius: float) -> np.ndarray:
    """Angle between the ball axis and the reflected ray for surface angle gamma.

    gamma parametrizes the visible cap: 0 at the point nearest the camera,
    arccos(r/dist) at the silhouette. Works in the 2D (axis, m) plane.
    """
    na = -np.cos(gamma)
    nm = np.sin(gamma)
    pa = dist + radius * na
    pm = radius * nm
    norm = np.sqrt(pa * pa + pm * pm)
    va = pa / norm
    vm = pm / norm
    dot = va * na + vm * nm
    oa = va - 2.0 * dot * na
    om = vm - 2.0 * dot * nm
    return np.arctan2(np.maximum(om, 0.0), oa)


def unwrap_ball(
    sprite: Sprite,
    ball: Ball,
    camera: Camera,
    env_height: int = 128,
    tol: float = 1e-6,
) -> tuple[em.EnvMap, np.ndarray]:
    """Invert the mirror mapping: environment map observed by one ball sprite.

    For each map direction, bisection (on the rotationally symmetric 1D angle
    equation) finds the surface point whose reflected view ray matches it; the
    sprite is then fetched bilinearly. Directions in the blind cone behind the
    ball, or whose footprint touches uncovered sprite pixels, are invalid.
    """
    c = ball.center
    dist = float(np.linalg.norm(c))
    axis = c / dist
    sin_alpha = ball.radius / dist
    alpha = np.arcsin(sin_alpha)
    gamma_sil = np.arccos(ball.radius / dist)

    dirs = em.pixel_center_directions(env_height).reshape(-1, 3)
    beta = np.arccos(np.clip(dirs @ axis, -1.0, 1.0))
    solvable = beta > alpha

    lo = np.zeros(beta.shape)
    hi = np.full(beta.shape, gamma_sil)
    iters = max(1, int(np.ceil(np.log2(gamma_sil / tol))))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        too_far = _unwrap_angle_of(mid, dist, ball.radius) < beta
        hi = np.where(too_far, mid, hi)
        lo = np.where(too_far, lo, mid)
    gamma = 0.5 * (lo + hi)

    perp = dirs - (dirs @ axis)[:, None] * axis[None, :]
    pnorm = np.linalg.norm(perp, axis=1)
    m = np.divide(perp, pnorm[:, None], out=np.zeros_like(perp), where=pnorm[:, None] > 1e-12)
    normal = -np.cos(gamma)[:, None] * axis[None, :] + np.sin(gamma)[:, None] * m
    surf = c[None, :] + ball.radius * normal
    u, v = camera.project(surf)
    su = u - sprite.x0
    sv = v - sprite.y0

    bh, bw = sprite.shape
    inside = (su >= 0) & (su < bw) & (sv >= 0) & (sv < bh)
    su_c = np.clip(su, 0, bw - 1e-9)
    sv_c = np.clip(sv, 0, bh - 1e-9)
    idx, wts = em.bilinear_setup(su_c, sv_c, bh, bw, wrap_u=False)
    rgb_flat = sprite.rgb.reshape(-1, 3)
    alpha_flat = sprite.alpha.reshape(-1)
    # alpha-weighted fetch: partially covered rim pixels still hold pure mirror
    # color (mean over hitting subrays), only empty texels must not contribute
    aw = wts * alpha_flat[idx]
    mass = aw.sum(axis=-1)
    colors = np.divide(
        (rgb_flat[idx].astype(np.float64) * aw[..., None]).sum(axis=-2),
        mass[:, None],
        out=np.zeros((len(dirs), 3)),
        where=mass[:, None] > 0,
    )
    covered = mass >= 0.25

    valid = solvable & inside & covered
    colors[~valid] = 0.0
    grid = np.clip(colors, 0.0, None).reshape(env_height, 2 * env_height, 3)
    env = em.EnvMap(HdrImage(grid.astype(np.float32)))
    return env, valid.reshape(env_height, 2 * env_height)

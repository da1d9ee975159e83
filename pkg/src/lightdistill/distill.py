"""Distillation of the light-field MLP from per-frame probe supervision.

Each iteration picks a random frame, scatters mirror balls at random depths in
its frustum, renders them under the current field (exposure-scaled, tonemapped,
composited over the frame), asks the prior oracle for a pseudo ground truth of
the same composite, and descends the masked image loss. The renderer records
every environment-map tap, so the loss gradient reaches the MLP parameters
exactly: loss -> composite weights -> bilinear taps -> tonemap -> field values.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import optimizer as opt
from . import probe as pr
from .configio import check_keys, load_json
from .envmap import pixel_center_directions
from .errors import ConfigError, DataValidationError, OracleError
from .imagehdr import LdrImage, read_pfm, read_png, tonemap_array, tonemap_gradient
from .lightfield import DomainBox, LightFieldMLP, save_checkpoint
from .oracle import FileOracle, OracleRequest, SyntheticOracle, steps_for_noise
from .probe import Camera, DepthMap
from .rng import stream
from .scenegen import SceneSpec, scene_from_json

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """Per-iteration exposure and noise-floor schedules, linear in s/(S-1).

    ev sweeps 0 -> ev_min and tau_min anneals 1 -> 0 across the run, hitting
    both endpoints exactly; tau_max stays fixed at 1.
    """

    steps: int
    ev_min: float = -5.0
    tau_max: float = 1.0

    def fraction(self, s: int) -> float:
        if self.steps <= 1:
            return 1.0
        return s / (self.steps - 1)

    def ev(self, s: int) -> float:
        return self.ev_min * self.fraction(s)

    def tau_min(self, s: int) -> float:
        return 1.0 - self.fraction(s)


_CONFIG_KEYS = {
    "frames", "depths", "data_dir", "camera", "scene", "n_probes", "steps", "seed",
    "oracle", "oracle_sigma", "oracle_env_height", "exchange_dir", "oracle_timeout_s",
    "loss_weights", "env_height", "supersample", "ev_min", "lr", "lr_final",
    "checkpoint_every", "dtype", "depth_range", "run_name",
}


@dataclass
class RunConfig:
    frames: list = field(default_factory=list)
    depths: list = field(default_factory=list)
    data_dir: str = ""
    camera: Camera | None = None
    scene: str = ""
    n_probes: int = 9
    steps: int = 4000
    seed: int = 0
    oracle: str = "synthetic"
    oracle_sigma: float = 0.02
    oracle_env_height: int | None = None
    exchange_dir: str = ""
    oracle_timeout_s: float = 300.0
    l2_weight: float = 1.0
    perceptual_weight: float = 1.0
    env_height: int = 32
    supersample: int = 4
    ev_min: float = -5.0
    lr: float = 1e-3
    lr_final: float = 1e-4
    checkpoint_every: int = 500
    dtype: str = "float32"
    depth_range: tuple[float, float] = (0.3, 0.9)
    run_name: str = "run"

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        check_keys(doc, _CONFIG_KEYS, "run config")
        lw = doc.get("loss_weights", {})
        check_keys(lw, {"l2", "perceptual"}, "run config.loss_weights")
        cfg = cls(
            frames=list(doc.get("frames", [])),
            depths=list(doc.get("depths", [])),
            data_dir=doc.get("data_dir", ""),
            camera=Camera.from_json(doc["camera"]) if "camera" in doc else None,
            scene=doc.get("scene", ""),
            n_probes=int(doc.get("n_probes", 9)),
            steps=int(doc.get("steps", 4000)),
            seed=int(doc.get("seed", 0)),
            oracle=doc.get("oracle", "synthetic"),
            oracle_sigma=float(doc.get("oracle_sigma", 0.02)),
            oracle_env_height=doc.get("oracle_env_height"),
            exchange_dir=doc.get("exchange_dir", ""),
            oracle_timeout_s=float(doc.get("oracle_timeout_s", 300.0)),
            l2_weight=float(lw.get("l2", 1.0)),
            perceptual_weight=float(lw.get("perceptual", 1.0)),
            env_height=int(doc.get("env_height", 32)),
            supersample=int(doc.get("supersample", 4)),
            ev_min=float(doc.get("ev_min", -5.0)),
            lr=float(doc.get("lr", 1e-3)),
            lr_final=float(doc.get("lr_final", 1e-4)),
            checkpoint_every=int(doc.get("checkpoint_every", 500)),
            dtype=doc.get("dtype", "float32"),
            depth_range=tuple(doc.get("depth_range", (0.3, 0.9))),
            run_name=doc.get("run_name", "run"),
        )
        if cfg.n_probes < 1 or cfg.steps < 1:
            raise ConfigError("run config: n_probes and steps must be >= 1")
        if cfg.oracle not in ("synthetic", "file"):
            raise ConfigError(f"run config: oracle must be synthetic|file, got {cfg.oracle!r}")
        if cfg.dtype not in ("float32", "float64"):
            raise ConfigError("run config: dtype must be float32|float64")
        if not (0.0 < cfg.depth_range[0] < cfg.depth_range[1] < 1.0):
            raise ConfigError("run config: depth_range must satisfy 0 < lo < hi < 1")
        if base_dir is not None:
            def resolve(p: str) -> str:
                return str(base_dir / p) if p and not Path(p).is_absolute() else p

            cfg.frames = [resolve(p) for p in cfg.frames]
            cfg.depths = [resolve(p) for p in cfg.depths]
            cfg.data_dir = resolve(cfg.data_dir)
            cfg.scene = resolve(cfg.scene)
            cfg.exchange_dir = resolve(cfg.exchange_dir)
        return cfg


@dataclass
class RunData:
    """Loaded frames, depths, camera, and optional analytic scene."""

    frames: list[LdrImage]
    depths: list[DepthMap]
    camera: Camera
    scene: SceneSpec | None = None

    @property
    def frame_count(self) -> int:
        return len(self.frames)


def load_run_data(cfg: RunConfig) -> RunData:
    frames, depths = list(cfg.frames), list(cfg.depths)
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        frames = sorted(str(p) for p in (root / "frames").glob("frame_*.png"))
        depths = sorted(str(p) for p in (root / "depth").glob("depth_*.pfm"))
    if not frames:
        raise ConfigError("run config: no input frames (set frames or data_dir)")
    if len(frames) != len(depths):
        raise ConfigError(f"run config: {len(frames)} frames but {len(depths)} depth maps")
    scene = None
    camera = cfg.camera
    if cfg.scene:
        scene, _ = scene_from_json(load_json(cfg.scene))
        if camera is None:
            camera = scene.camera
        if not scene.is_static:
            raise ConfigError("distill assumes a static camera; scene has a camera path")
    if camera is None:
        raise ConfigError("run config: camera missing (set camera or scene)")
    loaded_frames = [read_png(p) for p in frames]
    loaded_depths = [DepthMap(read_pfm(p)) for p in depths]
    for f, d in zip(loaded_frames, loaded_depths):
        if (f.height, f.width) != (camera.height, camera.width) or d.data.shape != (
            camera.height,
            camera.width,
        ):
            raise DataValidationError("run data: frame/depth size does not match camera")
    return RunData(loaded_frames, loaded_depths, camera, scene)


def frustum_domain_box(camera: Camera, depths: list[DepthMap], frame_count: int,
                       margin: float = 0.1) -> DomainBox:
    """Axis-aligned bounds of the sampleable frustum, expanded by `margin`."""
    z_max = max(float(d.data.max()) for d in depths)
    corners_u = np.array([0.0, camera.width, 0.0, camera.width])
    corners_v = np.array([0.0, 0.0, camera.height, camera.height])
    pts = camera.unproject(corners_u, corners_v, np.full(4, z_max))
    lo = np.minimum(pts.min(axis=0), 0.0)
    hi = np.maximum(pts.max(axis=0), 0.0)
    hi[2] = z_max
    lo[2] = 0.0
    span = hi - lo
    return DomainBox(lo - margin * span, hi + margin * span, t_max=frame_count)


def sample_probes(
    camera: Camera,
    depth: DepthMap,
    n: int,
    rng: np.random.Generator,
    depth_range: tuple[float, float] = (0.3, 0.9),
) -> pr.ProbeSet:
    """Scatter n mirror balls in the frustum, in front of the background.

    Pixels are drawn uniformly over the image; each is unprojected at a depth
    uniform in [lo, hi] * background depth. Pixels too shallow to host a valid
    ball (near-plane clearance) are rejected and redrawn.
    """
    lo, hi = depth_range
    k = min(camera.width, camera.height) / (8.0 * camera.fx)
    if k >= 1.0:
        raise DataValidationError("sample_probes: field of view too wide for valid balls")
    min_depth = max(2.0 * pr.NEAR_PLANE, pr.NEAR_PLANE / (lo * (1.0 - k)) * 1.01)
    balls = []
    attempts = 0
    dm = depth.data
    while len(balls) < n:
        attempts += 1
        if attempts > 10000 * n:
            raise DataValidationError("sample_probes: depth map leaves no valid pixels")
        iu = int(rng.integers(0, camera.width))
        iv = int(rng.integers(0, camera.height))
        d_bg = dm[iv, iu]
        if d_bg < min_depth:
            continue
        z = rng.uniform(lo * d_bg, hi * d_bg)
        center = camera.unproject(iu + 0.5, iv + 0.5, z)
        balls.append(pr.Ball(center=center, radius=pr.size_ball(camera, center)))
    return pr.ProbeSet(balls=tuple(balls), camera=camera, background_depth=depth)


# -- loss ---------------------------------------------------------------------


def _pool(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[:2]
    a = a[: h - h % 2, : w - w % 2]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def _unpool(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape + g.shape[2:], dtype=g.dtype)
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out[: up.shape[0], : up.shape[1]] = up
    return out


def _gradient_diff_level(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L1 difference of forward-difference image gradients; grad w.r.t. a."""
    dxa = a[:, 1:] - a[:, :-1]
    dxb = b[:, 1:] - b[:, :-1]
    dya = a[1:] - a[:-1]
    dyb = b[1:] - b[:-1]
    n = dxa.size + dya.size
    rx = dxa - dxb
    ry = dya - dyb
    value = (np.abs(rx).sum() + np.abs(ry).sum()) / n
    ga = np.zeros_like(a)
    sx = np.sign(rx) / n
    sy = np.sign(ry) / n
    ga[:, 1:] += sx
    ga[:, :-1] -= sx
    ga[1:] += sy
    ga[:-1] -= sy
    return float(value), ga


def perceptual_proxy(
    img: np.ndarray, target: np.ndarray, mask: np.ndarray, levels: int = 3
) -> tuple[float, np.ndarray]:
    """Multi-scale gradient-difference loss between masked images.

    Images are masked before pooling, so pixels outside the mask can never
    influence the value or the gradient. Returns (value, d value / d img).
    """
    m3 = mask[:, :, None].astype(img.dtype)
    a = img * m3
    b = target * m3
    pyr_grads = []
    shapes = []
    total = 0.0
    used = 0
    for _ in range(levels):
        if a.shape[0] < 2 or a.shape[1] < 2:
            break
        value, ga = _gradient_diff_level(a, b)
        total += value
        pyr_grads.append(ga)
        shapes.append(a.shape[:2])
        a = _pool(a)
        b = _pool(b)
        used += 1
    if used == 0:
        return 0.0, np.zeros_like(img)
    total /= used
    g = pyr_grads[-1] / used
    for lvl in range(used - 2, -1, -1):
        g = pyr_grads[lvl] / used + _unpool(g, shapes[lvl])
    return total, g * m3


def masked_loss(
    img: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    l2_weight: float = 1.0,
    perceptual_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Masked squared error plus the perceptual proxy; gradient w.r.t. img only.

    The target is a constant (stop-gradient pseudo ground truth). An empty mask
    yields zero loss and a warning.
    """
    if img.shape != target.shape or mask.shape != img.shape[:2]:
        raise DataValidationError("masked_loss: shape mismatch")
    n_mask = int(mask.sum())
    if n_mask == 0:
        log.warning("masked_loss: empty mask, zero loss")
        return 0.0, np.zeros_like(img)
    m3 = mask[:, :, None].astype(img.dtype)
    diff = (img - target) * m3
    n = 3.0 * n_mask
    value = l2_weight * float((diff * diff).sum()) / n
    grad = (2.0 * l2_weight / n) * diff
    if perceptual_weight != 0.0:
        pv, pg = perceptual_proxy(img, target, mask)
        value += perceptual_weight * pv
        grad = grad + perceptual_weight * pg
    return value, grad


# -- one iteration ---------------------------------------------------------------


@dataclass
class IterationDraw:
    """Everything random about one iteration, frozen before any evaluation."""

    s: int
    t: int
    probes: pr.ProbeSet
    ev: float
    tau: float
    k: int
    request_id: str


def draw_iteration(cfg: RunConfig, data: RunData, schedule: Schedule, s: int) -> IterationDraw:
    t = int(stream(cfg.seed, "frame", s).integers(1, data.frame_count + 1))
    probes = sample_probes(
        data.camera,
        data.depths[t - 1],
        cfg.n_probes,
        stream(cfg.seed, "probes", s),
        cfg.depth_range,
    )
    tau_lo = schedule.tau_min(s)
    tau = float(stream(cfg.seed, "tau", s).uniform(tau_lo, schedule.tau_max))
    return IterationDraw(
        s=s,
        t=t,
        probes=probes,
        ev=schedule.ev(s),
        tau=tau,
        k=steps_for_noise(tau),
        request_id=f"{cfg.run_name}-{s:06d}",
    )


@dataclass
class IterationResult:
    loss: float
    grad: np.ndarray | None
    composited: np.ndarray
    mask: np.ndarray
    pseudo_gt: LdrImage


def render_probe_composite(
    model: LightFieldMLP,
    psi: np.ndarray,
    box: DomainBox,
    draw: IterationDraw,
    frame: LdrImage,
    env_height: int,
    supersample: int,
):
    """Differentiable student render: field -> tonemap -> ball sprites -> composite."""
    cam = draw.probes.camera
    dirs = pixel_center_directions(env_height).reshape(-1, 3)
    n_dirs = len(dirs)
    encs = [
        model.encode(np.broadcast_to(b.center, (n_dirs, 3)), float(draw.t), dirs, box)
        for b in draw.probes.balls
    ]
    rgb, cache = model.forward(psi, np.concatenate(encs, axis=0))

    sprites = []
    tone_grads = []
    for i, ball in enumerate(draw.probes.balls):
        hdr = rgb[i * n_dirs : (i + 1) * n_dirs].reshape(env_height, 2 * env_height, 3)
        ldr = tonemap_array(hdr, draw.ev)
        tone_grads.append(tonemap_gradient(hdr, draw.ev))
        sprites.append(
            pr.render_ball_grid(ldr, ball, cam, supersample=supersample, record=True)
        )
    frame_data = frame.data.astype(psi.dtype)
    comp = pr.composite_arrays(frame_data, sprites, draw.probes.background_depth.data)
    return comp, sprites, tone_grads, cache, n_dirs


def oracle_round_trip(
    oracle, draw: IterationDraw, composited: np.ndarray, frame: LdrImage
) -> tuple[LdrImage, np.ndarray]:
    """Build the request for a rendered composite and fetch the pseudo ground truth."""
    mask, comp_depth = pr.project_mask_and_depth(draw.probes)
    req = OracleRequest(
        request_id=draw.request_id,
        t=draw.t,
        composited=LdrImage(np.clip(composited, 0.0, 1.0).astype(np.float32)),
        mask=mask,
        depth=comp_depth.data,
        background=frame,
        ev=draw.ev,
        tau=draw.tau,
        probes=draw.probes,
        k=draw.k,
    )
    return oracle.answer(req).pseudo_gt, mask


def run_iteration(
    model: LightFieldMLP,
    psi: np.ndarray,
    box: DomainBox,
    draw: IterationDraw,
    frame: LdrImage,
    cfg: RunConfig,
    oracle=None,
    pseudo_gt: LdrImage | None = None,
    mask: np.ndarray | None = None,
    want_grad: bool = True,
) -> IterationResult:
    """Render, fetch (or reuse) the pseudo ground truth, compute loss and gradient.

    Passing a precomputed (pseudo_gt, mask) pair keeps the target fixed, which
    is what the stop-gradient in the objective means: the pseudo ground truth
    is a constant for differentiation purposes.
    """
    comp, sprites, tone_grads, cache, n_dirs = render_probe_composite(
        model, psi, box, draw, frame, cfg.env_height, cfg.supersample
    )
    if pseudo_gt is None:
        if oracle is None:
            raise DataValidationError("run_iteration: need an oracle or a pseudo_gt")
        pseudo_gt, mask = oracle_round_trip(oracle, draw, comp.image, frame)
    image = comp.image.astype(psi.dtype)
    loss, d_image = masked_loss(
        image, pseudo_gt.data.astype(psi.dtype), mask, cfg.l2_weight, cfg.perceptual_weight
    )
    grad = None
    if want_grad:
        env_size = cfg.env_height * 2 * cfg.env_height
        upstream = np.zeros((len(sprites) * n_dirs, 3), dtype=np.float64)
        for i, sp in enumerate(sprites):
            bh, bw = sp.shape
            w = comp.weights[i, sp.y0 : sp.y0 + bh, sp.x0 : sp.x0 + bw]
            sprite_grad = w[:, :, None] * d_image[sp.y0 : sp.y0 + bh, sp.x0 : sp.x0 + bw]
            ldr_grad = sp.lookup.scatter_env_grad(sprite_grad.reshape(-1, 3), env_size)
            upstream[i * n_dirs : (i + 1) * n_dirs] = ldr_grad * tone_grads[i].reshape(-1, 3)
        grad = model.backward(psi, cache, upstream.astype(psi.dtype))
    return IterationResult(
        loss=loss, grad=grad, composited=image, mask=mask, pseudo_gt=pseudo_gt
    )


def build_oracle(cfg: RunConfig, data: RunData):
    if cfg.oracle == "synthetic":
        if data.scene is None:
            raise ConfigError("synthetic oracle requires a scene in the run config")
        return SyntheticOracle(
            data.scene,
            env_height=cfg.oracle_env_height or cfg.env_height,
            sigma=cfg.oracle_sigma,
            supersample=cfg.supersample,
        )
    if not cfg.exchange_dir:
        raise ConfigError("file oracle requires exchange_dir in the run config")
    return FileOracle(cfg.exchange_dir, timeout_s=cfg.oracle_timeout_s)


# -- full run ----------------------------------------------------------------------


def distill(cfg: RunConfig, out_dir) -> dict:
    """Run the full optimization; writes checkpoints and a report, returns the report."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    data = load_run_data(cfg)
    schedule = Schedule(steps=cfg.steps, ev_min=cfg.ev_min)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    model = LightFieldMLP(with_time=data.frame_count > 1)
    box = frustum_domain_box(data.camera, data.depths, data.frame_count)
    psi = model.init(cfg.seed, dtype=dtype)
    adam = opt.AdamState.for_params(psi, lr=cfg.lr)
    oracle = build_oracle(cfg, data)
    synthetic = isinstance(oracle, SyntheticOracle)

    report: dict = {
        "iterations": cfg.steps,
        "loss": [],
        "ev": [],
        "tau_min": [],
        "tau": [],
        "k": [],
        "frame": [],
        "checkpoints": [],
        "skipped": [],
    }
    t_start = time.monotonic()
    consecutive_failures = 0
    for s in range(cfg.steps):
        draw = draw_iteration(cfg, data, schedule, s)
        frame = data.frames[draw.t - 1]
        if synthetic:
            oracle.rng = stream(cfg.seed, "oracle-noise", draw.request_id)
        report["ev"].append(draw.ev)
        report["tau_min"].append(schedule.tau_min(s))
        report["tau"].append(draw.tau)
        report["k"].append(draw.k)
        report["frame"].append(draw.t)
        try:
            result = run_iteration(model, psi, box, draw, frame, cfg, oracle=oracle)
        except OracleError as exc:
            consecutive_failures += 1
            log.warning("iteration %d: oracle failure (%s), skipping", s, exc)
            report["skipped"].append(s)
            report["loss"].append(None)
            if consecutive_failures > 3:
                raise OracleError(
                    f"aborting after {consecutive_failures} consecutive oracle failures"
                ) from exc
            continue
        consecutive_failures = 0

        adam.lr = opt.cosine_lr(s, cfg.steps, cfg.lr, cfg.lr_final)
        psi = opt.step(adam, psi, result.grad)
        report["loss"].append(float(result.loss))

        if cfg.checkpoint_every > 0 and (s + 1) % cfg.checkpoint_every == 0:
            ck = out / "checkpoints" / f"step_{s + 1:06d}.ckpt"
            save_checkpoint(ck, psi, model, box)
            report["checkpoints"].append(ck.name)
        if s % 200 == 0:
            log.info(
                "iter %d/%d loss %.6f ev %.3f tau %.3f", s, cfg.steps, result.loss,
                draw.ev, draw.tau,
            )

    final = out / "checkpoints" / "final.ckpt"
    save_checkpoint(final, psi, model, box)
    report["checkpoints"].append(final.name)
    log.info("distill finished in %.1f s", time.monotonic() - t_start)
    (out / "report.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    return report

"""Prior oracle: anything that turns a probe composite into a pseudo ground truth.

The distillation loop is agnostic to where the pseudo ground truth comes from.
SyntheticOracle renders it from an analytic scene (desk-scale verification);
FileOracle bridges to an external responder process through an exchange
directory. Either way, pixels outside the inpainting mask are forced back to
the request's background on receipt: supervision is only valid inside the mask.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import probe as pr
from .errors import DataValidationError, OracleError, OracleTimeout
from .imagehdr import (
    LdrImage,
    read_png,
    tonemap_array,
    write_pfm,
    write_png,
)
from .scenegen import SceneSpec, gt_envmap

DEFAULT_CFG_SCALE = 12.5


def steps_for_noise(tau: float) -> int:
    """Sampler step count ceil(10 * tau) for noise level tau."""
    return int(math.ceil(10.0 * tau))


@dataclass
class OracleRequest:
    """One round trip's worth of context for the prior."""

    request_id: str
    t: int
    composited: LdrImage
    mask: np.ndarray
    depth: np.ndarray
    background: LdrImage
    ev: float
    tau: float
    probes: pr.ProbeSet
    k: int | None = None
    cfg_scale: float = DEFAULT_CFG_SCALE

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise DataValidationError(f"OracleRequest: tau={self.tau} outside [0, 1]")
        if self.k is None:
            self.k = steps_for_noise(self.tau)
        shape = self.composited.data.shape
        if self.background.data.shape != shape or self.mask.shape != shape[:2] \
                or self.depth.shape != shape[:2]:
            raise DataValidationError("OracleRequest: image dimensions inconsistent")

    def to_json(self) -> dict:
        return {
            "id": self.request_id,
            "t": self.t,
            "ev": float(self.ev),
            "tau": float(self.tau),
            "k": int(self.k),
            "cfg_scale": float(self.cfg_scale),
            "camera": self.probes.camera.to_json(),
            "balls": [
                {
                    "x": float(b.center[0]),
                    "y": float(b.center[1]),
                    "z": float(b.center[2]),
                    "r": float(b.radius),
                }
                for b in self.probes.balls
            ],
        }


@dataclass
class OracleResponse:
    request_id: str
    pseudo_gt: LdrImage


def enforce_inpainting_contract(req: OracleRequest, image: np.ndarray) -> LdrImage:
    """Clamp to [0,1] and force pixels outside the mask back to the background."""
    out = np.clip(image, 0.0, 1.0).astype(np.float32)
    out = np.where(req.mask[:, :, None], out, req.background.data)
    return LdrImage(out)


class SyntheticOracle:
    """Renders the pseudo ground truth directly from an analytic scene.

    Ball sprites are drawn under the scene's exact environment maps at each
    ball's location, tonemapped at the request's ev, and composited over the
    background. Gaussian pixel noise of std sigma * tau stands in for the
    stochasticity of a generative prior at high noise levels.
    """

    def __init__(self, scene: SceneSpec, env_height: int = 32, sigma: float = 0.02,
                 supersample: int = 4, rng=None):
        self.scene = scene
        self.env_height = env_height
        self.sigma = sigma
        self.supersample = supersample
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def answer(self, req: OracleRequest) -> OracleResponse:
        cam = req.probes.camera
        if (cam.width, cam.height) != (self.scene.camera.width, self.scene.camera.height):
            raise DataValidationError("SyntheticOracle: request camera does not match scene")
        if not (1 <= req.t <= self.scene.frame_count):
            raise DataValidationError(f"SyntheticOracle: frame {req.t} outside scene")
        pose = self.scene.pose(req.t)
        sprites = []
        for ball in req.probes.balls:
            x_world = pose.transform_points(ball.center)
            env = gt_envmap(self.scene, x_world, req.t, self.env_height)
            ldr_grid = tonemap_array(env.data, req.ev)
            sprites.append(
                pr.render_ball_grid(ldr_grid, ball, cam, supersample=self.supersample)
            )
        result = pr.composite_arrays(
            req.background.data, sprites, req.probes.background_depth.data
        )
        image = result.image.astype(np.float64)
        if self.sigma > 0.0 and req.tau > 0.0:
            image = image + self.rng.normal(0.0, self.sigma * req.tau, size=image.shape)
        return OracleResponse(req.request_id, enforce_inpainting_contract(req, image))


class FileOracle:
    """Bridges to an external responder via a request/response directory.

    Request bundle: <dir>/req/<id>/{request.json, composited.png, mask.png,
    depth.pfm, background.png}. Response: <dir>/resp/<id>/pseudo_gt.png with a
    <dir>/resp/<id>.done marker written last (atomicity); <dir>/resp/<id>.err
    carries a failure message instead.
    """

    def __init__(self, exchange_dir, timeout_s: float = 300.0, poll_s: float = 0.1):
        self.exchange = Path(exchange_dir)
        self.timeout_s = timeout_s
        self.poll_s = poll_s
        (self.exchange / "req").mkdir(parents=True, exist_ok=True)
        (self.exchange / "resp").mkdir(parents=True, exist_ok=True)

    def answer(self, req: OracleRequest) -> OracleResponse:
        req_dir = self.exchange / "req" / req.request_id
        req_dir.mkdir(parents=True, exist_ok=True)
        write_png(req_dir / "composited.png", req.composited)
        write_png(req_dir / "mask.png", req.mask.astype(np.float64))
        write_pfm(req_dir / "depth.pfm", req.depth)
        write_png(req_dir / "background.png", req.background)
        # request.json written last: responders may treat it as the ready marker
        tmp = req_dir / "request.json.tmp"
        tmp.write_text(json.dumps(req.to_json(), sort_keys=True, indent=2) + "\n")
        tmp.rename(req_dir / "request.json")

        marker = self.exchange / "resp" / f"{req.request_id}.done"
        errfile = self.exchange / "resp" / f"{req.request_id}.err"
        image_path = self.exchange / "resp" / req.request_id / "pseudo_gt.png"
        deadline = time.monotonic() + self.timeout_s
        while time.monotonic() < deadline:
            if errfile.exists():
                raise OracleError(
                    f"oracle request {req.request_id} failed: {errfile.read_text().strip()}"
                )
            if marker.exists():
                return self._load_response(req, image_path)
            time.sleep(self.poll_s)
        raise OracleTimeout(
            f"oracle request {req.request_id}: no response within {self.timeout_s:.0f} s"
        )

    def _load_response(self, req: OracleRequest, image_path: Path) -> OracleResponse:
        if not image_path.exists():
            raise OracleError(f"oracle request {req.request_id}: marker without image")
        img = read_png(image_path)
        if img.data.shape != req.composited.data.shape:
            raise OracleError(
                f"oracle request {req.request_id}: response is {img.data.shape[:2]}, "
                f"expected {req.composited.data.shape[:2]}"
            )
        return OracleResponse(req.request_id, enforce_inpainting_contract(req, img.data))

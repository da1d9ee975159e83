"""MLP radiance field over (position, time, direction) with exact reverse-mode gradients.

The network maps sinusoidally encoded inputs through 6 hidden ReLU layers of
width 256 (the encoded input is concatenated again at the third layer) and a
softplus output head, so predicted radiance is always non-negative. Forward,
backward, and initialization are written directly against the flat parameter
vector; there is no autodiff framework underneath.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envmap import EnvMap, pixel_center_directions
from .errors import DataValidationError, FileFormatError
from .imagehdr import HdrImage

HIDDEN_DIM = 256
NUM_HIDDEN = 6
SKIP_LAYER = 3  # 1-indexed; this layer's input is concat(previous hidden, encoding)

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DomainBox:
    """Input normalization bounds: x box, frame range t in [1, t_max]."""

    x_min: np.ndarray
    x_max: np.ndarray
    t_max: int = 1

    def __post_init__(self):
        lo = np.asarray(self.x_min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.x_max, dtype=np.float64).reshape(3)
        if not (hi > lo).all():
            raise DataValidationError("DomainBox: x_max must exceed x_min on every axis")
        if self.t_max < 1:
            raise DataValidationError("DomainBox: t_max must be >= 1")
        object.__setattr__(self, "x_min", lo)
        object.__setattr__(self, "x_max", hi)

    def to_json(self) -> dict:
        return {"x_min": self.x_min.tolist(), "x_max": self.x_max.tolist(), "t_max": self.t_max}

    @classmethod
    def from_json(cls, d: dict) -> "DomainBox":
        return cls(np.array(d["x_min"]), np.array(d["x_max"]), int(d["t_max"]))


def positional_encoding(values: np.ndarray, num_freqs: int) -> np.ndarray:
    """(sin(2^k pi p), cos(2^k pi p)) for k < num_freqs, per scalar component.

    values: (..., D) pre-normalized to [-1, 1]; output (..., 2 * num_freqs * D).
    """
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    angles = values[..., None, :] * freqs[:, None]  # (..., F, D)
    enc = np.concatenate([np.sin(angles), np.cos(angles)], axis=-2)
    return enc.reshape(*values.shape[:-1], 2 * num_freqs * values.shape[-1])


class LightFieldMLP:
    """Fixed-architecture radiance field L(x, t, d) -> RGB.

    with_time=False drops the time input entirely (single-image mode); the
    encoded input shrinks but every other shape relation is unchanged.
    """

    def __init__(self, x_freqs: int = 6, t_freqs: int = 4, d_freqs: int = 4,
                 with_time: bool = True):
        self.x_freqs = x_freqs
        self.t_freqs = t_freqs
        self.d_freqs = d_freqs
        self.with_time = with_time
        self.enc_dim = 2 * (x_freqs * 3 + (t_freqs if with_time else 0) + d_freqs * 3)
        self.clamp_events = 0

        dims = []
        in_dim = self.enc_dim
        for layer in range(1, NUM_HIDDEN + 1):
            if layer == SKIP_LAYER:
                in_dim += self.enc_dim
            dims.append((in_dim, HIDDEN_DIM))
            in_dim = HIDDEN_DIM
        dims.append((HIDDEN_DIM, 3))
        self.layer_dims = dims

        offsets = []
        total = 0
        for din, dout in dims:
            offsets.append((total, total + din * dout, total + din * dout + dout))
            total += din * dout + dout
        self._offsets = offsets
        self.param_count = total

    # -- parameter handling ------------------------------------------------

    def views(self, psi: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer (W, b) views into the flat parameter vector."""
        if psi.shape != (self.param_count,):
            raise DataValidationError(
                f"parameter vector has {psi.shape}, expected ({self.param_count},)"
            )
        out = []
        for (din, dout), (w0, b0, end) in zip(self.layer_dims, self._offsets):
            out.append((psi[w0:b0].reshape(din, dout), psi[b0:end]))
        return out

    def init(self, seed: int, dtype=np.float32) -> np.ndarray:
        """Kaiming-uniform weights (final layer scaled by 0.1), zero biases."""
        from .rng import stream

        rng = stream(seed, "lightfield-init")
        psi = np.zeros(self.param_count, dtype=np.float64)
        views = self.views(psi)
        for i, (w, b) in enumerate(views):
            bound = np.sqrt(6.0 / w.shape[0])
            sample = rng.uniform(-bound, bound, size=w.shape)
            if i == len(views) - 1:
                sample *= 0.1
            w[...] = sample
        return psi.astype(dtype)

    # -- input handling ------------------------------------------------------

    def encode(self, x: np.ndarray, t: np.ndarray, d: np.ndarray, box: DomainBox) -> np.ndarray:
        """Normalize raw (x, t, d) into [-1, 1] and apply positional encoding."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = np.atleast_2d(np.asarray(d, dtype=np.float64))
        n = max(x.shape[0], d.shape[0])
        x = np.broadcast_to(x, (n, 3))
        d = np.broadcast_to(d, (n, 3))

        span = box.x_max - box.x_min
        xn = 2.0 * (x - box.x_min) / span - 1.0
        clipped = np.count_nonzero((xn < -1.0) | (xn > 1.0))
        if clipped:
            self.clamp_events += clipped
        xn = np.clip(xn, -1.0, 1.0)

        parts = [positional_encoding(xn, self.x_freqs)]
        if self.with_time:
            t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (n,))
            if box.t_max > 1:
                tn = 2.0 * (t - 1.0) / (box.t_max - 1.0) - 1.0
            else:
                tn = np.zeros_like(t)
            over = np.count_nonzero((tn < -1.0) | (tn > 1.0))
            if over:
                self.clamp_events += over
            tn = np.clip(tn, -1.0, 1.0)
            parts.append(positional_encoding(tn[:, None], self.t_freqs))
        parts.append(positional_encoding(np.clip(d, -1.0, 1.0), self.d_freqs))
        return np.concatenate(parts, axis=1)

    # -- forward / backward ---------------------------------------------------

    def forward(self, psi: np.ndarray, enc: np.ndarray) -> tuple[np.ndarray, dict]:
        """Evaluate the network on encoded inputs; returns (rgb, cache for backward)."""
        if not np.isfinite(psi).all():
            raise DataValidationError("forward: non-finite parameters")
        dt = psi.dtype
        enc = enc.astype(dt, copy=False)
        views = self.views(psi)
        h = enc
        inputs = []
        for layer in range(NUM_HIDDEN):
            if layer + 1 == SKIP_LAYER:
                h = np.concatenate([h, enc], axis=1)
            w, b = views[layer]
            z = h @ w
            z += b
            inputs.append(h)
            h = np.maximum(z, 0.0, out=z)  # ReLU in place; mask recovered as h > 0
        w, b = views[-1]
        z_out = h @ w + b
        rgb = _softplus(z_out)
        cache = {"enc": enc, "inputs": inputs, "h_last": h, "z_out": z_out}
        return rgb, cache

    def backward(self, psi: np.ndarray, cache: dict, upstream: np.ndarray) -> np.ndarray:
        """d(sum of upstream * rgb)/d psi for the batch of the preceding forward."""
        dt = psi.dtype
        if upstream.shape != cache["z_out"].shape:
            raise DataValidationError(
                f"backward: upstream shape {upstream.shape} != {cache['z_out'].shape}"
            )
        views = self.views(psi)
        grad = np.zeros_like(psi)
        gviews = self.views(grad)

        delta = upstream.astype(dt, copy=False) * _sigmoid(cache["z_out"])
        gw, gb = gviews[-1]
        gw += cache["h_last"].T @ delta
        gb += delta.sum(axis=0)
        dh = delta @ views[-1][0].T

        outputs = cache["inputs"][1:] + [cache["h_last"]]
        for layer in range(NUM_HIDDEN - 1, -1, -1):
            out = outputs[layer]
            if layer + 2 == SKIP_LAYER:
                out = out[:, :HIDDEN_DIM]  # next layer's input holds concat(out, enc)
            np.multiply(dh, out > 0, out=dh)
            gw, gb = gviews[layer]
            gw += cache["inputs"][layer].T @ dh
            gb += dh.sum(axis=0)
            dh = dh @ views[layer][0].T
            if layer + 1 == SKIP_LAYER:
                dh = np.ascontiguousarray(dh[:, : dh.shape[1] - self.enc_dim])
        return grad

    # -- public evaluation ------------------------------------------------------

    def eval(self, psi: np.ndarray, x, t, d, box: DomainBox) -> np.ndarray:
        """Radiance (..., 3) at position x, frame t, incoming direction d."""
        single = np.asarray(d).ndim == 1 and np.asarray(x).ndim == 1
        enc = self.encode(x, t, d, box)
        rgb, _ = self.forward(psi, enc)
        return rgb[0] if single else rgb

    def eval_envmap(self, psi: np.ndarray, x, t, height: int, box: DomainBox) -> EnvMap:
        """The field's HDR environment map at (x, t): one eval per pixel direction."""
        dirs = pixel_center_directions(height).reshape(-1, 3)
        rgb = self.eval(psi, np.asarray(x, dtype=np.float64).reshape(1, 3), t, dirs, box)
        grid = rgb.reshape(height, 2 * height, 3).astype(np.float32)
        return EnvMap(HdrImage(grid))


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, psi: np.ndarray, model: LightFieldMLP, box: DomainBox) -> None:
    """Versioned binary parameter blob plus a JSON sidecar with the domain box."""
    path = Path(path)
    header = struct.pack(
        "<4sIBBBBIIQ",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        1 if model.with_time else 0,
        model.x_freqs,
        model.t_freqs,
        model.d_freqs,
        HIDDEN_DIM,
        NUM_HIDDEN,
        model.param_count,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(psi.astype("<f4").tobytes())
    sidecar = {"domain_box": box.to_json()}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    )


def load_checkpoint(path) -> tuple[np.ndarray, LightFieldMLP, DomainBox]:
    path = Path(path)
    blob = path.read_bytes()
    head_fmt = "<4sIBBBBIIQ"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise FileFormatError(f"{path}: truncated checkpoint header")
    magic, version, with_time, xf, tf, df, hidden, n_hidden, count = struct.unpack(
        head_fmt, blob[:head_size]
    )
    if magic != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FileFormatError(f"{path}: unsupported checkpoint version {version}")
    if hidden != HIDDEN_DIM or n_hidden != NUM_HIDDEN:
        raise FileFormatError(f"{path}: architecture mismatch")
    model = LightFieldMLP(x_freqs=xf, t_freqs=tf, d_freqs=df, with_time=bool(with_time))
    if count != model.param_count:
        raise FileFormatError(f"{path}: parameter count mismatch")
    payload = blob[head_size:]
    if len(payload) < 4 * count:
        raise FileFormatError(f"{path}: truncated checkpoint payload")
    psi = np.frombuffer(payload[: 4 * count], dtype="<f4").astype(np.float32)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise FileFormatError(f"{sidecar_path}: missing checkpoint sidecar")
    box = DomainBox.from_json(json.loads(sidecar_path.read_text())["domain_box"])
    return psi, model, box

"""HDR/LDR image containers, the exposure/tonemap model, bracket merging, and file I/O.

Images are numpy arrays of shape (height, width, 3), row-major, linear RGB.
HDR data is open-range non-negative radiance; LDR data lives in [0, 1] and is
gamma-encoded. HDR files are PFM (32-bit float), LDR files are 8-bit PNG.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataValidationError, FileFormatError

DEFAULT_GAMMA = 2.4
DEFAULT_EV_MIN = -5.0

# Saturation threshold: half an 8-bit quantization step under the top code.
SATURATION_EPS = 1.0 / 512.0


def _as_rgb_array(data, name: str) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataValidationError(f"{name}: expected (H, W, 3) array, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


@dataclass(frozen=True)
class HdrImage:
    """Linear-radiance image; all channel values finite and >= 0."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_rgb_array(self.data, "HdrImage")
        if not np.isfinite(arr).all():
            raise DataValidationError("HdrImage: non-finite pixel value")
        if (arr < 0).any():
            raise DataValidationError("HdrImage: negative radiance")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LdrImage:
    """Gamma-encoded display image; all values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_rgb_array(self.data, "LdrImage")
        if not np.isfinite(arr).all():
            raise DataValidationError("LdrImage: non-finite pixel value")
        if (arr < 0).any() or (arr > 1).any():
            raise DataValidationError("LdrImage: value outside [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class ExposureValue:
    """Exposure in stops; radiance is scaled by 2**ev before tonemapping.

    ev = 0 is nominal exposure, ev_min the darkest allowed setting.
    """

    ev: float
    ev_min: float = DEFAULT_EV_MIN

    def __post_init__(self):
        if not self.ev_min < 0:
            raise DataValidationError(f"ExposureValue: ev_min must be negative, got {self.ev_min}")
        if not (self.ev_min <= self.ev <= 0):
            raise DataValidationError(
                f"ExposureValue: ev={self.ev} outside [{self.ev_min}, 0]"
            )

    @property
    def scale(self) -> float:
        return float(2.0 ** self.ev)


def tonemap_array(radiance: np.ndarray, ev: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """clamp(2**ev * radiance, 0, 1) ** (1/gamma), elementwise."""
    if gamma <= 0:
        raise DataValidationError(f"gamma must be positive, got {gamma}")
    dt = radiance.dtype.type
    scaled = np.clip(radiance * dt(2.0**ev), 0.0, 1.0)
    return scaled ** dt(1.0 / gamma)


def tonemap_gradient(radiance: np.ndarray, ev: float, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """d tonemap / d radiance, elementwise; zero where the clamp saturates."""
    dt = radiance.dtype.type
    scale = dt(2.0**ev)
    scaled = radiance * scale
    unsaturated = (scaled > 0.0) & (scaled < 1.0)
    safe = np.where(unsaturated, scaled, dt(1.0))
    grad = dt(1.0 / gamma) * safe ** dt(1.0 / gamma - 1.0) * scale
    return np.where(unsaturated, grad, dt(0.0))


def tonemap(img: HdrImage, ev: ExposureValue, gamma: float = DEFAULT_GAMMA) -> LdrImage:
    """Scale by 2**ev, clamp to [0, 1], gamma-compress."""
    return LdrImage(tonemap_array(img.data, ev.ev, gamma))


def inverse_tonemap(
    img: LdrImage, ev: ExposureValue, gamma: float = DEFAULT_GAMMA
) -> tuple[HdrImage, np.ndarray]:
    """Invert tonemap for unsaturated values.

    Returns the linear estimate value**gamma / 2**ev and a per-channel boolean
    saturation flag (True where value >= 1 - SATURATION_EPS, i.e. the clamp may
    have destroyed information and the estimate is a lower bound).
    """
    if gamma <= 0:
        raise DataValidationError(f"gamma must be positive, got {gamma}")
    v = img.data
    saturated = v >= (1.0 - SATURATION_EPS)
    linear = v ** v.dtype.type(gamma) / v.dtype.type(2.0**ev.ev)
    return HdrImage(linear), saturated


def merge_weight(v: np.ndarray) -> np.ndarray:
    """Triangular hat weight on LDR value: 1 at mid-gray, 0 at both extremes."""
    return np.clip(1.0 - np.abs(2.0 * v - 1.0), 0.0, 1.0)


def merge_exposures(
    brackets: list[tuple[LdrImage, ExposureValue]], gamma: float = DEFAULT_GAMMA
) -> HdrImage:
    """Merge exposure brackets into a single linear HDR image.

    Per channel: hat-weighted average of the unsaturated inverse-tonemapped
    estimates. Channels saturated in every bracket fall back to the lowest-ev
    bracket (the darkest exposure clips last).
    """
    if not brackets:
        raise DataValidationError("merge_exposures: need at least one bracket")
    shape = brackets[0][0].data.shape
    evs = [ev.ev for _, ev in brackets]
    if len(set(evs)) != len(evs):
        raise DataValidationError("merge_exposures: duplicate ev values")
    for img, _ in brackets:
        if img.data.shape != shape:
            raise DataValidationError(
                f"merge_exposures: dimension mismatch {img.data.shape} vs {shape}"
            )

    acc = np.zeros(shape, dtype=np.float64)
    wsum = np.zeros(shape, dtype=np.float64)
    usable = np.zeros(shape, dtype=np.int64)
    lowest = min(range(len(brackets)), key=lambda i: evs[i])

    estimates = []
    saturations = []
    for img, ev in brackets:
        linear, sat = inverse_tonemap(img, ev, gamma)
        estimates.append(linear.data.astype(np.float64))
        saturations.append(sat)
        w = np.where(sat, 0.0, merge_weight(img.data.astype(np.float64)))
        acc += w * estimates[-1]
        wsum += w
        usable += ~sat

    merged = np.divide(acc, wsum, out=np.zeros(shape), where=wsum > 0)
    # Unsaturated somewhere but all hat weights vanished (exact zeros): plain
    # mean of the unsaturated estimates.
    flat = (wsum == 0) & (usable > 0)
    if flat.any():
        est = np.stack(estimates)
        ok = ~np.stack(saturations)
        merged[flat] = (est * ok).sum(axis=0)[flat] / usable[flat]
    all_sat = usable == 0
    if all_sat.any():
        merged[all_sat] = estimates[lowest][all_sat]
    return HdrImage(merged.astype(brackets[0][0].data.dtype))


# ---------------------------------------------------------------------------
# File I/O. PFM carries float32 data (HDR, depth); PNG carries 8-bit LDR.
# ---------------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+([+-]?\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)\s")


def write_pfm(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as PFM, little-endian, bottom-up rows."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataValidationError(f"write_pfm: unsupported shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array, (H, W) for Pf, (H, W, 3) for PF."""
    blob = Path(path).read_bytes()
    m = _PFM_HEADER.match(blob)
    if m is None:
        raise FileFormatError(f"{path}: malformed PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    if scale == 0:
        raise FileFormatError(f"{path}: PFM scale must be nonzero")
    endian = "<" if scale < 0 else ">"
    payload = blob[m.end() :]
    count = w * h * channels
    if len(payload) < count * 4:
        raise FileFormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(payload[: count * 4], dtype=endian + "f4")
    arr = data.reshape(h, w, channels)[::-1]
    if abs(scale) != 1.0:
        arr = arr * abs(scale)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    return arr[..., 0] if channels == 1 else arr


def write_png(path, img: LdrImage | np.ndarray) -> None:
    """Write an LDR image (or a (H, W) array in [0,1]) as 8-bit PNG."""
    arr = img.data if isinstance(img, LdrImage) else np.asarray(img)
    quant = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "RGB" if quant.ndim == 3 else "L"
    Image.fromarray(quant, mode=mode).save(path, format="PNG")


def read_png(path) -> LdrImage:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise FileFormatError(f"{path}: cannot read PNG ({exc})") from exc
    return LdrImage(arr)


def read_png_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    except Exception as exc:
        raise FileFormatError(f"{path}: cannot read PNG ({exc})") from exc


def read_image(path) -> HdrImage | LdrImage:
    """Read .pfm as HdrImage, .png as LdrImage."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        arr = read_pfm(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return HdrImage(arr)
    if suffix == ".png":
        return read_png(path)
    raise FileFormatError(f"{path}: unsupported image extension {suffix!r}")


def write_image(img: HdrImage | LdrImage, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        if not isinstance(img, HdrImage):
            raise DataValidationError("write_image: PFM expects an HdrImage")
        write_pfm(path, img.data)
    elif suffix == ".png":
        if not isinstance(img, LdrImage):
            raise DataValidationError("write_image: PNG expects an LdrImage")
        write_png(path, img)
    else:
        raise FileFormatError(f"{path}: unsupported image extension {suffix!r}")

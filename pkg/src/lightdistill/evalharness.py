"""Three-sphere evaluation: render probe spheres under predicted and reference
environment maps and score them with scale-invariant metrics.

Spheres are rendered orthographically (front hemisphere, 256x256 by default,
viewer looking along +Z). The diffuse sphere integrates the map against the
cosine lobe over the full pixel quadrature; the matte sphere uses a Phong lobe
with self-normalized quadrature weights (so a constant map renders exactly at
the tint, and the matte sphere converges to the mirror one as the exponent
grows); the mirror sphere is a single reflection lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envmap import EnvMap, pixel_center_directions, sample_bilinear, solid_angle_weights
from .errors import DataValidationError

MATERIALS = ("gray-diffuse", "silver-matte", "silver-mirror")

DIFFUSE_ALBEDO = 0.5
MATTE_TINT = np.array([0.9, 0.9, 0.9])
MATTE_EXPONENT = 50.0
SPHERE_SIZE = 256
_CHUNK = 1024


@dataclass(frozen=True)
class MaterialSphere:
    """One of the three fixed evaluation materials."""

    kind: str

    def __post_init__(self):
        if self.kind not in MATERIALS:
            raise DataValidationError(f"unknown material {self.kind!r}; one of {MATERIALS}")


def _sphere_normals(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Front-hemisphere normals per pixel and the visibility mask."""
    j = (np.arange(size) + 0.5 - size / 2) / (size / 2)
    i = (size / 2 - (np.arange(size) + 0.5)) / (size / 2)
    px, py = np.meshgrid(j, i)
    rr = px * px + py * py
    visible = rr <= 1.0
    pz = -np.sqrt(np.clip(1.0 - rr, 0.0, None))
    normals = np.stack([px, py, pz], axis=-1)
    normals[~visible] = 0.0
    return normals, visible


def _env_quadrature(env: EnvMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-texel directions and solid-angle weights, flattened."""
    h = env.height
    dirs = pixel_center_directions(h).reshape(-1, 3)
    w = np.repeat(solid_angle_weights(h), 2 * h)
    return dirs, w


def _lobe_integral(
    lobe_dirs: np.ndarray,
    env: EnvMap,
    exponent: float | None,
    normalize: bool,
) -> np.ndarray:
    """sum env * max(0, d . lobe)^exponent * w over texels, chunked over pixels.

    exponent=None means the cosine lobe (power 1). With normalize=True the
    quadrature is divided by its own lobe mass instead of used raw.
    """
    dirs, w = _env_quadrature(env)
    radiance = (env.data.reshape(-1, 3) * w[:, None]).astype(np.float32)
    mass_w = w.astype(np.float32)
    dirs32 = dirs.astype(np.float32).T  # (3, T)
    out = np.zeros((len(lobe_dirs), 3), dtype=np.float64)
    mass = np.zeros(len(lobe_dirs), dtype=np.float64)
    for start in range(0, len(lobe_dirs), _CHUNK):
        chunk = lobe_dirs[start : start + _CHUNK].astype(np.float32)
        cos = np.clip(chunk @ dirs32, 0.0, None)
        if exponent is not None:
            cos = cos**np.float32(exponent)
        out[start : start + _CHUNK] = cos @ radiance
        if normalize:
            mass[start : start + _CHUNK] = cos @ mass_w
    if normalize:
        return out / np.maximum(mass, 1e-20)[:, None]
    return out


def render_sphere(env: EnvMap, material: MaterialSphere, size: int = SPHERE_SIZE) -> np.ndarray:
    """HDR image (size, size, 3) of the material sphere under the map."""
    normals, visible = _sphere_normals(size)
    n_vis = normals[visible]
    out = np.zeros((size, size, 3))
    view = np.array([0.0, 0.0, 1.0])
    if material.kind == "gray-diffuse":
        irr = _lobe_integral(n_vis, env, exponent=None, normalize=False)
        out[visible] = DIFFUSE_ALBEDO / np.pi * irr
    elif material.kind == "silver-mirror":
        refl = n_vis * (-2.0 * n_vis[:, 2:3]) + view
        refl /= np.linalg.norm(refl, axis=1, keepdims=True)
        out[visible] = sample_bilinear(env, refl)
    else:  # silver-matte
        refl = n_vis * (-2.0 * n_vis[:, 2:3]) + view
        refl /= np.linalg.norm(refl, axis=1, keepdims=True)
        lobe = _lobe_integral(refl, env, exponent=MATTE_EXPONENT, normalize=True)
        out[visible] = MATTE_TINT * lobe
    return out


def render_sphere_phong(env: EnvMap, exponent: float, size: int = SPHERE_SIZE) -> np.ndarray:
    """Matte render at an arbitrary Phong exponent (tint excluded)."""
    normals, visible = _sphere_normals(size)
    n_vis = normals[visible]
    view = np.array([0.0, 0.0, 1.0])
    refl = n_vis * (-2.0 * n_vis[:, 2:3]) + view
    refl /= np.linalg.norm(refl, axis=1, keepdims=True)
    out = np.zeros((size, size, 3))
    out[visible] = _lobe_integral(refl, env, exponent=exponent, normalize=True)
    return out


# -- metrics --------------------------------------------------------------------


def si_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    """RMSE minimized over a global non-negative scale on the prediction."""
    value, _ = si_rmse_with_alpha(pred, gt)
    return value


def si_rmse_with_alpha(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    if pred.shape != gt.shape:
        raise DataValidationError("si_rmse: shape mismatch")
    p = pred.astype(np.float64).ravel()
    g = gt.astype(np.float64).ravel()
    pp = float(p @ p)
    alpha = max(float(p @ g) / pp, 0.0) if pp > 0 else 0.0
    diff = alpha * p - g
    return float(np.sqrt(np.mean(diff * diff))), alpha


def angular_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean angle in degrees between per-pixel RGB vectors; zero vectors skipped."""
    if pred.shape != gt.shape:
        raise DataValidationError("angular_error: shape mismatch")
    p = pred.reshape(-1, 3).astype(np.float64)
    g = gt.reshape(-1, 3).astype(np.float64)
    pn = np.linalg.norm(p, axis=1)
    gn = np.linalg.norm(g, axis=1)
    ok = (pn > 0) & (gn > 0)
    if not ok.any():
        return 0.0
    cos = (p[ok] * g[ok]).sum(axis=1) / (pn[ok] * gn[ok])
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(ang.mean())


def _percentile_normalize(img: np.ndarray) -> np.ndarray:
    flat = np.sort(img.astype(np.float64).ravel())
    lo = _percentile_sorted(flat, 0.1)
    hi = _percentile_sorted(flat, 99.9)
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float64)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def _percentile_sorted(sorted_flat: np.ndarray, q: float) -> float:
    """Linear-interpolated percentile of an already sorted flat array."""
    n = len(sorted_flat)
    rank = q / 100.0 * (n - 1)
    lo = int(np.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return float(sorted_flat[lo] * (1 - frac) + sorted_flat[hi] * frac)


def normalized_rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    """RMSE after each image is independently mapped so its own 0.1/99.9
    percentiles (over all channels jointly) land on 0/1, clamped."""
    if pred.shape != gt.shape:
        raise DataValidationError("normalized_rmse: shape mismatch")
    a = _percentile_normalize(pred)
    b = _percentile_normalize(gt)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class MetricReport:
    """Per-material metric means over probes, plus per-probe detail."""

    per_material: dict
    per_probe: list

    def to_json(self) -> dict:
        return {"per_material": self.per_material, "per_probe": self.per_probe}


def _probe_entry(pe: EnvMap, ge: EnvMap, name: str, sphere_size: int) -> dict:
    entry: dict = {"probe": name}
    for m in MATERIALS:
        mat = MaterialSphere(m)
        pimg = render_sphere(pe, mat, sphere_size)
        gimg = render_sphere(ge, mat, sphere_size)
        value, alpha = si_rmse_with_alpha(pimg, gimg)
        entry[m] = {
            "si_rmse": value,
            "si_alpha": alpha,
            "angular_error_deg": angular_error(pimg, gimg),
            "normalized_rmse": normalized_rmse(pimg, gimg),
        }
    return entry


def evaluate(
    pred_envs: list[EnvMap],
    gt_envs: list[EnvMap],
    sphere_size: int = SPHERE_SIZE,
    names: list[str] | None = None,
    jobs: int = 1,
) -> MetricReport:
    """Render all three material spheres per probe pair and average the metrics.

    jobs > 1 parallelizes over probes (threads; numpy releases the GIL); the
    aggregation order is fixed, so the report is identical either way.
    """
    if len(pred_envs) != len(gt_envs) or not pred_envs:
        raise DataValidationError("evaluate: need matching, non-empty env lists")
    labels = names if names else [str(i) for i in range(len(pred_envs))]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_probe = list(
                pool.map(
                    lambda args: _probe_entry(*args, sphere_size),
                    zip(pred_envs, gt_envs, labels),
                )
            )
    else:
        per_probe = [
            _probe_entry(pe, ge, nm, sphere_size)
            for pe, ge, nm in zip(pred_envs, gt_envs, labels)
        ]
    n = len(pred_envs)
    per_material = {}
    for m in MATERIALS:
        per_material[m] = {
            key: sum(e[m][key] for e in per_probe) / n
            for key in ("si_rmse", "si_alpha", "angular_error_deg", "normalized_rmse")
        }
    return MetricReport(per_material=per_material, per_probe=per_probe)

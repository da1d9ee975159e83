"""Command-line surface: scene-gen, distill, eval, probe-render, envmap-export.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every artifact-producing
run writes a manifest (config path, seed, content hash of the inputs, output
layout) before anything else, so runs are auditable and reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distill as dst
from . import probe as pr
from . import scenegen as sg
from .configio import check_keys, load_json
from .envmap import load_envmap
from .errors import ConfigError, LightDistillError
from .evalharness import evaluate
from .imagehdr import tonemap_array, write_pfm, write_png
from .lightfield import load_checkpoint

log = logging.getLogger(__name__)

ERROR_PREFIX = "lightdistill: error:"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{ERROR_PREFIX} {message}", file=sys.stderr)
        raise SystemExit(1)


def _content_hash(paths: list[Path], extra: bytes = b"") -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p).encode())
        if p.is_file():
            h.update(p.read_bytes())
    h.update(extra)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config_path: str, seed: int,
                    inputs: list[Path], layout: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": str(config_path),
        "seed": seed,
        "input_hash": _content_hash(inputs),
        "layout": layout,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# -- subcommands -----------------------------------------------------------------


def cmd_scene_gen(args) -> int:
    scene, probes = sg.scene_from_json(load_json(args.scene))
    out = Path(args.out)
    _write_manifest(
        out, "scene-gen", args.scene, 0, [Path(args.scene)],
        {"frames": "frames/frame_%04d.png", "depth": "depth/depth_%04d.pfm",
         "gt": "gt/probe_%03d_t%02d.pfm"},
    )
    (out / "frames").mkdir(exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    for t in range(1, scene.frame_count + 1):
        ldr, depth, _ = sg.render_background(scene, scene.camera, t)
        write_png(out / "frames" / f"frame_{t:04d}.png", ldr)
        write_pfm(out / "depth" / f"depth_{t:04d}.pfm", depth.data)
    if probes:
        (out / "gt").mkdir(exist_ok=True)
        for i, probe in enumerate(probes):
            env = sg.gt_envmap(scene, np.array(probe["x"], dtype=np.float64),
                               probe["t"], args.gt_height)
            write_pfm(out / "gt" / f"probe_{i:03d}_t{int(probe['t']):02d}.pfm", env.data)
    log.info("scene-gen: %d frames -> %s", scene.frame_count, out)
    return 0


def cmd_distill(args) -> int:
    doc = load_json(args.config)
    cfg = dst.RunConfig.from_json(doc, base_dir=Path(args.config).resolve().parent)
    if args.oracle:
        cfg.oracle = args.oracle
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    inputs = [Path(args.config)]
    if cfg.scene:
        inputs.append(Path(cfg.scene))
    inputs += [Path(p) for p in cfg.frames] + [Path(p) for p in cfg.depths]
    if cfg.data_dir:
        inputs += sorted(Path(cfg.data_dir).rglob("*"))
    _write_manifest(
        out, "distill", args.config, cfg.seed, inputs,
        {"checkpoints": "checkpoints/step_*.ckpt + final.ckpt", "report": "report.json"},
    )
    dst.distill(cfg, out)
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = sorted(pred_dir.glob("*.pfm"))
    gt_files = sorted(gt_dir.glob("*.pfm"))
    if not pred_files:
        raise ConfigError(f"eval: no PFM files under {pred_dir}")
    if [p.name for p in pred_files] != [g.name for g in gt_files]:
        raise ConfigError("eval: prediction and ground-truth file names do not match")
    preds = [load_envmap(p) for p in pred_files]
    gts = [load_envmap(g) for g in gt_files]
    report = evaluate(preds, gts, names=[p.name for p in pred_files], jobs=args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n")
    for m, vals in report.per_material.items():
        log.info("eval %s: si_rmse %.4f angular %.3f deg nrmse %.4f", m,
                 vals["si_rmse"], vals["angular_error_deg"], vals["normalized_rmse"])
    return 0


def cmd_probe_render(args) -> int:
    env = load_envmap(args.env)
    ball_doc = load_json(args.ball)
    check_keys(ball_doc, {"x", "y", "z", "r"}, "ball spec")
    camera = pr.Camera.from_json(load_json(args.camera))
    ball = pr.Ball(
        center=np.array([ball_doc["x"], ball_doc["y"], ball_doc["z"]]),
        radius=float(ball_doc["r"]),
    )
    out = Path(args.out)
    _write_manifest(
        out, "probe-render", args.ball, 0,
        [Path(args.env), Path(args.ball), Path(args.camera)],
        {"sprite": "sprite.pfm + sprite.png", "mask": "mask.png"},
    )
    sprite = pr.render_ball(env, ball, camera, supersample=args.supersample)
    full = np.zeros((camera.height, camera.width, 3), dtype=np.float32)
    bh, bw = sprite.shape
    full[sprite.y0 : sprite.y0 + bh, sprite.x0 : sprite.x0 + bw] = sprite.rgb
    write_pfm(out / "sprite.pfm", full)
    write_png(out / "sprite.png", tonemap_array(full.astype(np.float64), ev=0.0))
    far = pr.DepthMap(np.full((camera.height, camera.width), 1e6))
    mask, _ = pr.project_mask_and_depth(
        pr.ProbeSet(balls=(ball,), camera=camera, background_depth=far)
    )
    write_png(out / "mask.png", mask.astype(np.float64))
    return 0


def cmd_envmap_export(args) -> int:
    psi, model, box = load_checkpoint(args.checkpoint)
    doc = load_json(args.probes)
    probes = doc["probes"] if isinstance(doc, dict) else doc
    out = Path(args.out)
    _write_manifest(
        out, "envmap-export", args.probes, 0,
        [Path(args.checkpoint), Path(args.probes)],
        {"envmaps": "probe_%03d_t%02d.pfm"},
    )
    for i, probe in enumerate(probes):
        check_keys(probe, {"x", "t"}, f"probes[{i}]")
        env = model.eval_envmap(psi, np.array(probe["x"], dtype=np.float64),
                                float(probe["t"]), args.height, box)
        write_pfm(out / f"probe_{i:03d}_t{int(probe['t']):02d}.pfm", env.data)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lightdistill",
                     description="Distill a spatiotemporal HDR light field from probe renders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene-gen", help="render an analytic scene to frames/depths/GT maps")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--gt-height", type=int, default=128, help="GT env map height")
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("distill", help="optimize the light-field MLP")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--oracle", choices=["synthetic", "file"], default=None,
                   help="override the config's oracle choice")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="three-sphere metrics between two envmap directories")
    p.add_argument("--pred", required=True, help="directory of predicted PFMs")
    p.add_argument("--gt", required=True, help="directory of ground-truth PFMs")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--jobs", type=int, default=1, help="parallel probe evaluations")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-render", help="render one mirror ball under an env map")
    p.add_argument("--env", required=True, help="environment map PFM")
    p.add_argument("--ball", required=True, help="ball spec JSON {x,y,z,r}")
    p.add_argument("--camera", required=True, help="camera JSON {fx,fy,cx,cy,w,h}")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--supersample", type=int, default=4)
    p.set_defaults(func=cmd_probe_render)

    p = sub.add_parser("envmap-export", help="dump the field's env maps at listed probes")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--probes", required=True, help="JSON list of {x: [3], t}")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_envmap_export)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (LightDistillError, OSError) as exc:
        print(f"{ERROR_PREFIX} {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is still a runtime failure
        print(f"{ERROR_PREFIX} unexpected: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

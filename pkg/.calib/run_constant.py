import numpy as np, time, json
from pathlib import Path
from lightdistill.cli import main
from lightdistill import distill as dst
from lightdistill import scenegen as sg
from lightdistill.configio import load_json
from lightdistill.lightfield import load_checkpoint

root = Path("/root/pkg/.calib/const")
root.mkdir(parents=True, exist_ok=True)
scene_path = Path("/root/pkg/fixtures/scene_constant.json")
if not (root/"data/frames").exists():
    main(["scene-gen", "--scene", str(scene_path), "--out", str(root/"data")])

cfg = dst.RunConfig(
    data_dir=str(root/"data"), scene=str(scene_path),
    steps=4000, seed=0, oracle="synthetic", oracle_sigma=0.02,
    env_height=24, supersample=2, checkpoint_every=1000, run_name="const")
t0 = time.time()
report = dst.distill(cfg, root/"out")
print(f"distill: {time.time()-t0:.0f}s")

scene, probes = sg.scene_from_json(load_json(scene_path))
psi, model, box = load_checkpoint(root/"out/checkpoints/final.ckpt")
worst = 0.0
for p in probes:
    x = np.array(p["x"])
    means = np.array([float(model.eval_envmap(psi, x, float(t), 64, box).data.mean())
                      for t in range(1, scene.frame_count+1)])
    ratio = means.std()/means.mean()
    worst = max(worst, ratio)
    print(f"x={p['x']}: mean {means.mean():.4f} std/mean {ratio:.4f}")
print(f"WORST std/mean = {worst:.4f} (<= 0.05?)")

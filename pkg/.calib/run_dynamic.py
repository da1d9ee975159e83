import numpy as np, time, json
from pathlib import Path
from lightdistill.cli import main
from lightdistill import distill as dst
from lightdistill import scenegen as sg
from lightdistill import evalharness as ev
from lightdistill.configio import load_json
from lightdistill.lightfield import load_checkpoint

root = Path("/root/pkg/.calib/dyn")
root.mkdir(parents=True, exist_ok=True)
scene_path = Path("/root/pkg/fixtures/scene_dynamic.json")
if not (root/"data/frames").exists():
    main(["scene-gen", "--scene", str(scene_path), "--out", str(root/"data")])

cfg = dst.RunConfig(
    data_dir=str(root/"data"), scene=str(scene_path),
    steps=4000, seed=0, oracle="synthetic", oracle_sigma=0.02,
    env_height=24, supersample=2, checkpoint_every=1000, run_name="dyn")
t0 = time.time()
report = dst.distill(cfg, root/"out")
print(f"distill: {time.time()-t0:.0f}s, final losses {report['loss'][-5:]}")

# held-out eval
scene, probes = sg.scene_from_json(load_json(scene_path))
psi, model, box = load_checkpoint(root/"out/checkpoints/final.ckpt")
res = {"probes": []}
si_list, ang_list = [], []
for p in probes:
    x = np.array(p["x"]); t = p["t"]
    pred = model.eval_envmap(psi, x, float(t), 128, box)
    gt = sg.gt_envmap(scene, x, t, 128)
    mir_p = ev.render_sphere(pred, ev.MaterialSphere("silver-mirror"))
    mir_g = ev.render_sphere(gt, ev.MaterialSphere("silver-mirror"))
    si = ev.si_rmse(mir_p, mir_g); ang = ev.angular_error(mir_p, mir_g)
    si_list.append(si); ang_list.append(ang)
    print(f"probe x={p['x']} t={t}: mirror si={si:.4f} ang={ang:.3f}")
print(f"MEAN mirror si-RMSE {np.mean(si_list):.4f} (<=0.15?) angular {np.mean(ang_list):.3f} (<=8?)")

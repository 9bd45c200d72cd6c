"""Watch gradient descent pull two overlapping people apart in embedding space.

The embedding map itself is the parameter; no network is involved.

Run: python3 demos/02_disentangle.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from bboxmask import EmbParams, OptConfig, RandomInit, SynthConfig, box_iou, generate, optimize_embedding
from bboxmask import similarity_snapshot, write_pgm

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out_dir.mkdir(exist_ok=True)

scene = generate(SynthConfig(seed=7, num_instances=2, overlap=0.5))
a, b = scene.instances
print(f"boxes {a.box.as_list()} and {b.box.as_list()}, IoU {box_iou(a.box, b.box):.3f}")

params = EmbParams(beta=10.0, dim=8)
config = OptConfig(steps=500, lr=0.5, init=RandomInit(seed=7), emb_params=params)
e, log = optimize_embedding(scene, config)

# pair_sim is the kernel similarity between the two center embeddings,
# coherence the distance from each center to its own box mean.
print(f"{'step':>5s} {'total':>8s} {'pair_sim':>9s} {'coherence':>9s} {'bg_sep':>7s}")
for row in log.rows[::100]:
    r = dict(zip(("step", "total", "pull_in", "push_out", "push_inst", "pair_sim", "coherence", "bg_sep"), row))
    print(f"{r['step']:5d} {r['total']:8.4f} {r['pair_sim']:9.4f} {r['coherence']:9.4f} {r['bg_sep']:7.4f}")

# Similarity to person 1's center around the two boxes: '#' > 0.5, '+' > 0.1.
x0, y0 = int(min(a.box.x_min, b.box.x_min)) - 2, int(min(a.box.y_min, b.box.y_min)) - 2
x1, y1 = int(max(a.box.x_max, b.box.x_max)) + 2, int(max(a.box.y_max, b.box.y_max)) + 2
sim = similarity_snapshot(e, scene, a.id, params).data[0]
for y in range(max(y0, 0), min(y1, scene.height)):
    line = ""
    for x in range(max(x0, 0), min(x1, scene.width)):
        line += "#" if sim[y, x] > 0.5 else "+" if sim[y, x] > 0.1 else "."
    print(line)

in_a = np.zeros(sim.shape, bool)
in_a[int(a.box.y_min):int(a.box.y_max), int(a.box.x_min):int(a.box.x_max)] = True
in_b = np.zeros(sim.shape, bool)
in_b[int(b.box.y_min):int(b.box.y_max), int(b.box.x_min):int(b.box.x_max)] = True
print(f"mean similarity to A's center: inside A {sim[in_a].mean():.3f}, inside B only {sim[in_b & ~in_a].mean():.3f}")

for inst in scene.instances:
    write_pgm(out_dir / f"similarity_{inst.id}.pgm", similarity_snapshot(e, scene, inst.id, params), vmin=0, vmax=1)
log.write_csv(out_dir / "trajectory.csv")
print(f"wrote similarity maps and trajectory to {out_dir}/")

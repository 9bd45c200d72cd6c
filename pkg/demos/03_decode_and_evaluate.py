"""From ground truth to heatmaps, back to people, and scored with OKS AP.

Run: python3 demos/03_decode_and_evaluate.py
"""

import numpy as np

from bboxmask import DecodeParams, KeypointSet, OksParams, Prediction, SynthConfig
from bboxmask import decode_centers, encode_center_map, encode_keypoint_maps, generate, match_and_score
from bboxmask.heatmap import group_keypoints

scene = generate(SynthConfig(seed=3, num_instances=3, min_center_spacing=14))
print("true centers:", [inst.center for inst in scene.instances])

# Gaussian targets for centers and keypoints.
center_map = encode_center_map(scene)
keypoint_maps = encode_keypoint_maps(scene)

# Peaks of the center map are the detected people, best first.
centers = decode_centers(center_map, DecodeParams(max_instances=10))
print("decoded centers:", [(x, y, round(s, 3)) for x, y, s in centers])

# Split the keypoint maps between detections (nearest center owns each pixel).
groups = group_keypoints(keypoint_maps, centers)
preds = [Prediction(k, score) for k, (_, _, score) in zip(groups, centers)]
report = match_and_score(preds, scene)
print(f"decoded predictions: AP {report.ap:.3f}  AR {report.ar:.3f}")

# Jitter the keypoints and watch AP fall off as OKS thresholds tighten.
rng = np.random.default_rng(0)
for noise in (0.5, 1.5, 3.0):
    noisy = []
    for inst in scene.instances:
        pts = inst.keypoints.points.copy()
        pts[:, :2] += rng.normal(scale=noise, size=pts[:, :2].shape)
        noisy.append(Prediction(KeypointSet(pts), float(rng.uniform())))
    rep = match_and_score(noisy, scene, OksParams())
    per_t = " ".join(f"{row['ap_t']:.2f}" for row in rep.per_threshold)
    print(f"noise {noise:3.1f}px  AP {rep.ap:.3f}  per threshold: {per_t}")

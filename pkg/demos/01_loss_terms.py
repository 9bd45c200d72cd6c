"""A tour of the three embedding loss terms on a hand-sized map.

Run: python3 demos/01_loss_terms.py
"""

import numpy as np

from bboxmask import BBox, EmbeddingBatch, EmbParams, Instance, KeypointSet, Scene
from bboxmask import bbox_mask_loss, check_gradient, pull_in, push_inst, push_out
from bboxmask.gradcheck import embedding_loss_fn

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)

# Two people on an 8x8 canvas. Their boxes overlap by a 2x2 patch.
no_keypoints = KeypointSet(np.zeros((0, 3)))
people = (
    Instance(1, BBox(0, 0, 5, 5), (2, 2), no_keypoints),
    Instance(2, BBox(3, 3, 8, 8), (5, 5), no_keypoints),
)
scene = Scene(8, 8, 0, people)

# A random 4-channel embedding map. Every pixel gets L2-normalized inside the loss.
e = rng.normal(size=(4, 8, 8))
params = EmbParams(beta=10.0, dim=4)
batch = EmbeddingBatch(e, scene)

print("instance embeddings p (one row per person):")
print(batch.p)

# pull_in: distance from each center embedding to the similarity-weighted box mean.
# push_out: kernel similarity between each center and the mean of everything outside its box.
# push_inst: kernel similarity between every pair of centers.
for term in (pull_in, push_out, push_inst):
    print(f"{term.__name__:10s} {term(batch, params).value:.6f}")

total = bbox_mask_loss(batch, params)
print("total     ", round(total.value, 6), total.parts)

# The gradient is taken w.r.t. the raw map, through normalization and the soft mask.
report = check_gradient(embedding_loss_fn(bbox_mask_loss, scene, e, params), e)
print(f"finite-difference check: pass={report.passed}, max abs err {report.max_abs_err:.1e}")

# With one person the pairwise push has nothing to compare, but the
# background push still produces a gradient.
solo = Scene(8, 8, 0, people[:1])
solo_batch = EmbeddingBatch(e, solo)
res = bbox_mask_loss(solo_batch, params)
print("single person:", res.parts)
print("largest push_out gradient entry:", np.abs(push_out(solo_batch, params).grad).max())

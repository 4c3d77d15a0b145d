"""
Aligning and fusing score maps, then measuring them
===================================================

The two branches produce scores on unrelated scales. Validation statistics
put the RGB map on the 3D scale; the fused map is their pixel-wise maximum.
"""

import numpy as np

from mdss import fusion, metrics

rng = np.random.default_rng(0)

# %%
# Pretend validation maps: RGB scores near 2, 3D scores near 0.01.
rgb_val = [rng.normal(2.0, 0.3, (32, 32)) for _ in range(5)]
sdf_val = [rng.normal(0.01, 0.002, (32, 32)) for _ in range(5)]
stats = fusion.calibrate(rgb_val, sdf_val)
print(stats)
print("mu + 3 sigma maps to", fusion.align_rgb(np.array(stats.mu_rgb + 3 * stats.sigma_rgb), stats),
      "expected", stats.mu_3d + 3 * stats.sigma_3d)

# %%
# A test set where half the images contain a 4x4 defect that only the RGB
# branch sees.
maps, gts, scores, labels = [], [], [], []
for i in range(20):
    rgb = rng.normal(2.0, 0.3, (32, 32))
    sdf = rng.normal(0.01, 0.002, (32, 32))
    gt = np.zeros((32, 32), bool)
    if i % 2:
        gt[10:14, 18:22] = True
        rgb[gt] += 2.0
    fused = fusion.fuse_pixel(fusion.align_rgb(rgb, stats), sdf)
    maps.append(fused)
    gts.append(gt)
    scores.append(fusion.image_score(rgb, sdf))
    labels.append(bool(i % 2))

# %%
# Image-level AUROC and the area under the per-region overlap curve up to a
# 30 % false positive rate.
print("I-AUROC", metrics.auroc(scores, labels))
value, curve = metrics.aupro(maps, gts, fpr_max=0.3)
print("AUPRO", round(value, 3), "from", len(curve.fpr), "thresholds")

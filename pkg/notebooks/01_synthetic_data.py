"""
Synthetic scenes, loading and preprocessing
===========================================

Generate a small benchmark, read it back through the dataset loader and
look at what background removal and the foreground mask do.
"""

import tempfile

import numpy as np

from mdss import dataio, synth

# %%
# A scene is an elliptical object on a flat plane. Color blotches only touch
# the RGB image, bumps and dents only touch the heightfield.
spec = synth.random_scene(seed=4, size=96)
dent = synth.DefectSpec("dent", center=(48, 40), radius=8.0, magnitude=0.03)
normal = synth.generate(spec, split="test", stem="000")
broken = synth.generate(spec, [dent], split="test", stem="001")
dz = broken.cloud.xyz[..., 2] - normal.cloud.xyz[..., 2]
print("deepest point of the dent:", dz.min(), "pixels changed:", int((dz != 0).sum()))
print("RGB unchanged:", np.array_equal(broken.rgb, normal.rgb))

# %%
# Write a whole category and load the training split. Loading runs the
# RANSAC plane removal and the 8x8 foreground dilation.
root = tempfile.mkdtemp()
synth.make_benchmark(root, seed=0, n_train=4, n_val=2, n_test_normal=2, n_test_anom=2, size=96)
train = dataio.load_dataset(root, "synthetic", "train", size=96)
s = train[0]
print(f"{s.sample_id}: {s.cloud.n_valid} object points of {s.fg.size}, "
      f"{int(s.fg.sum())} foreground pixels")

# %%
# The mask is a dilation: a lone valid pixel marks an 8x8 block.
one = np.zeros((12, 12), bool)
one[6, 6] = True
print(dataio.make_foreground_mask(dataio.OrganizedCloud(np.where(one[..., None], 1.0, 0.0), one)).astype(int))

"""
3D branch: local patches and a learned signed distance
======================================================

Normal surface patches teach an implicit function what the surface looks
like; points the function places off the surface get high scores.
"""

import numpy as np

from mdss import dataio, sdl, synth

# %%
# Patches are the K nearest neighbours of farthest-point-sampled centres,
# with extra centres until every point is covered.
train = [dataio.preprocess_sample(synth.generate(synth.random_scene(i, size=64), split="train"), 64)
         for i in range(6)]
ps = sdl.build_patches(train[0].cloud, k=200, mask=train[0].fg)
print(f"{len(ps.points)} points -> {len(ps)} patches, minimum coverage {ps.coverage().min()}")

# %%
# Each patch is centred and scaled to the unit ball before training.
print("radius of normalized patches:", np.linalg.norm(ps.normalized(), axis=2).max(axis=1)[:4])

# %%
# Train briefly on the normal clouds.
cfg = sdl.SdfConfig(k=200, steps=300, hidden=(64, 64), queries_per_patch=64, batch_size=16)
state = sdl.train_sdf(train, cfg)
print("pull loss first/last:", state.loss_history[0], state.loss_history[-1])

# %%
# Score a normal cloud and one with a bump.
spec = synth.random_scene(50, size=64)
bump = synth.DefectSpec("bump", (32, 32), 7.0, 0.04)
for name, defects in (("normal", []), ("bump", [bump])):
    s = dataio.preprocess_sample(synth.generate(spec, defects, split="test"), 64)
    patches = sdl.build_patches(s.cloud, k=200, mask=s.fg)
    m, peak = sdl.sdl_score_map(sdl.score_points(state.model, patches), s.fg.shape)
    print(f"{name:6s} max score {peak:.5f}")

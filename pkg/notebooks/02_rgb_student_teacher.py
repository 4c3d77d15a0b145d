"""
RGB branch: patch description network and dynamic loss
======================================================

A student PDN learns to imitate a frozen teacher on normal images. Where it
fails to imitate, the image is unusual.
"""

import numpy as np
import torch

from mdss import st_net, synth

# %%
# The network has no padding, so a 256 px input gives a 56x56 grid and each
# output cell sees a 33x33 pixel window.
net = st_net.make_pdn()
print(net(torch.zeros(1, 3, 256, 256)).shape)

# %%
# The dynamic loss averages only the hardest entries: those above the
# d-quantile of the masked discrepancy.
D = torch.tensor([[0.1, 0.2], [0.3, 4.0]])
print("hard-entry mean:", float(st_net.dynamic_loss(D, torch.ones(2, 2), 0.5)))

# %%
# Train a small student for a few hundred steps and compare the maximum score
# of a normal image with one carrying a color blotch.
size = 64
train = [synth.generate(synth.random_scene(i, size=size), split="train", stem=str(i)) for i in range(8)]
channels = (16, 32, 32, 32)
teacher = st_net.fit_feature_normalization(st_net.make_pdn(channels), train)
state = st_net.train_student(teacher, train, st_net.StConfig(steps=300, lr=2e-3))
print("loss first/last:", state.loss_history[0], state.loss_history[-1])

spec = synth.random_scene(100, size=size)
blotch = synth.DefectSpec("color_blotch", (32, 32), 6.0, 0.3)
pair = [synth.generate(spec, split="test"), synth.generate(spec, [blotch], split="test")]
(m0, s0), (m1, s1) = st_net.rgb_score_maps(teacher, state.student, pair)
print(f"normal max {s0:.3f}  blotch max {s1:.3f}")
print("blotch peak at", np.unravel_index(np.argmax(m1), m1.shape))

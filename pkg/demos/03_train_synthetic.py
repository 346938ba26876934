# %% [markdown]
# Training on the synthetic target dataset
#
# 200 training and 50 test images, 64x64, one small bright target per image
# (about one target pixel per hundred). The same model and seed are trained
# with the weighted focal loss and with plain cross-entropy.

# %%
import sys
import time

import numpy as np

from mavnet import data as D
from mavnet.model import Model, ModelConfig
from mavnet.train import RunConfig, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 500
train_set = D.generate_synthetic(1, 200)
test_set = D.generate_synthetic(2, 50)
fg = sum(int((s.labels == 1).sum()) for s in train_set)
print(f"target pixels: {fg}, background per target pixel: {(200 * 64 * 64 - fg) / fg:.0f}")

# %%
reports = {}
for loss, weights in (("focal", (1.0, 20.0)), ("cross_entropy", None)):
    cfg = RunConfig(loss=loss, class_weights=weights, max_steps=steps, seed=0,
                    augmentation=D.AugmentationConfig(seed=0))
    model = Model(ModelConfig.default(), seed=0)
    t0 = time.perf_counter()
    res = train(model, train_set, cfg)
    rep = evaluate(model, test_set, ["background", "target"], centroid_class=1)
    reports[loss] = rep
    head, tail = np.mean(res.losses[:20]), np.mean(res.losses[-20:])
    print(f"{loss:<14} {time.perf_counter() - t0:5.1f}s  loss {head:.4f} -> {tail:.4f}")

# %%
for loss, rep in reports.items():
    print(f"\n== {loss} ==")
    print(rep.to_text(), end="")
# the weighted focal model trades false positives for fewer missed target pixels

"""
The autodiff engine and the denoiser
====================================

The denoiser is built on a small reverse-mode autodiff engine over numpy
arrays. This script checks its gradients against central differences, then
trains a clean (unpoisoned) model for a few hundred steps and samples an
edit from it.
"""
import time
from pathlib import Path

import numpy as np

from editpoison import nncore as nn
from editpoison.denoiser import Denoiser, DenoiserConfig
from editpoison.diffusion import TrainRunConfig, sample, train
from editpoison.evalkit import functionality_proxies
from editpoison.imagecore import save_image
from editpoison.poisonset import VOCAB, clean_dataset, gen_toy_dataset
from editpoison.trigger_textual import tokenize

out = Path("demo_output/denoiser")
out.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(0)

# %%
# Gradient check
# --------------
# A float64 copy of a small model keeps finite differences well above
# rounding noise.
small = Denoiser(DenoiserConfig(vocab_size=len(VOCAB), hidden=8, text_dim=8, time_dim=8, cond_dim=8), seed=0)
small = small.astype(np.float64)
x = rng.standard_normal((2, 16, 16, 3))
src = rng.uniform(-1, 1, (2, 16, 16, 3))
target = rng.random((2, 16, 16, 3))
loss = lambda: nn.mse_loss(small.forward(x, np.array([3, 40]), src, [(4, 5), (6,)]), target)  # noqa: E731
print(f"{small.n_params} params, max relative gradient error "
      f"{nn.grad_check(loss, small.params, eps=1e-3, n_coords=200):.2e}")

# %%
# A short clean training run
# --------------------------
samples = gen_toy_dataset(330, side=16, seed=0)
train_set, test_set = samples[:300], samples[300:]
cfg = TrainRunConfig(total_steps=600, batch=16, lr=2e-3, seed=0)
t0 = time.time()
result = train(clean_dataset(train_set), cfg)
print(f"trained {cfg.total_steps} steps in {time.time() - t0:.0f}s, "
      f"final loss {np.mean([row[1] for row in result.curve[-50:]]):.4f}")

sched = cfg.schedule()
scores = []
for i, s in enumerate(test_set[:8]):
    edited = sample(result.model, s.input_image, tokenize(s.prompt, VOCAB), sched, seed=i)
    scores.append(functionality_proxies(edited, s))
    save_image(np.concatenate([s.input_image, edited, s.edit_target], axis=1), out / f"edit_{i}.ppm")
print("mean image_preserve %.3f, text_align %.3f" % (np.mean([p for _, p in scores]),
                                                     np.mean([a for a, _ in scores if a is not None])))
print("each edit_*.ppm shows input | model edit | ground truth")

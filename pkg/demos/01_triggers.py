"""
Visual and textual triggers
===========================

Every trigger is a small frozen dataclass, and applying it is a pure
function. This script renders one toy scene, stamps each of the five visual
triggers on it, and shows what the three textual triggers do to a prompt.
Images are written as PPM files under ``demo_output/triggers``.
"""
from pathlib import Path

import numpy as np

from editpoison.imagecore import save_image
from editpoison.poisonset import VOCAB, gen_toy_dataset
from editpoison.trigger_textual import TextTriggerSpec, apply_text_trigger, tokenize
from editpoison.trigger_visual import VISUAL_KINDS, default_visual_spec, trigger_footprint

out = Path("demo_output/triggers")
out.mkdir(parents=True, exist_ok=True)

# One 16x16 scene from the synthetic editing set.
sample = gen_toy_dataset(1, side=16, seed=0)[0]
print("prompt:", sample.prompt)
save_image(sample.input_image, out / "input.ppm")

# %%
# Visual triggers
# ---------------
# BadNet touches only its corner patch; the others change the whole image.
# The mean absolute change gives a rough sense of how visible each one is.
for kind in VISUAL_KINDS:
    spec = default_visual_spec(kind, side=16)
    triggered = spec.apply(sample.input_image)
    changed = np.any(triggered != sample.input_image, axis=-1)
    footprint = trigger_footprint(spec, 16, 16)
    print(f"{kind:7s} mean |delta| {np.abs(triggered - sample.input_image).mean():.4f}  "
          f"pixels changed {changed.sum():3d}  footprint {footprint.sum():3d}")
    save_image(triggered, out / f"{kind}.ppm")

# %%
# Textual triggers
# ----------------
# Prompts are word-level token sequences over a closed vocabulary. Each
# textual trigger inserts exactly one sentinel token.
prompt = tokenize(sample.prompt, VOCAB)
for kind in ("badt2i", "mark", "word"):
    spec = TextTriggerSpec(kind)
    trig = apply_text_trigger(prompt, spec, VOCAB)
    print(f"{kind:6s} {spec.placement:7s} -> {trig.raw!r}  ids {trig.tokens}")

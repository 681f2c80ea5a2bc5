"""
Building a poisoned training set
================================

Poisoning turns a fraction of clean (image, prompt, edited image) triples
into backdoor triples: the triggers are applied to the input and the target
is replaced by the attacker's goal. With both modalities configured, the
adversarial-negative option adds single-trigger entries that keep the
normal target.
"""
from collections import Counter
from pathlib import Path

from editpoison.imagecore import save_image
from editpoison.poisonset import (
    AttackGoal,
    PoisonConfig,
    gen_toy_dataset,
    make_backdoor_target,
    poison,
    read_manifest,
    write_manifest,
)
from editpoison.trigger_textual import TextTriggerSpec
from editpoison.trigger_visual import BadNet

out = Path("demo_output/poisoning")
out.mkdir(parents=True, exist_ok=True)

samples = gen_toy_dataset(200, side=16, seed=0)
print("prompts:", Counter(s.prompt.split()[0] for s in samples))

# %%
# The three attack goals
# ----------------------
# ImageAttack always emits the same sprite, StyleAttack emits the correct
# edit in grayscale, and ObjectAttack swaps circles for crosses (so only
# circle samples are eligible).
s = next(x for x in samples if x.scene.shape == "circle")
save_image(s.input_image, out / "input.ppm")
save_image(s.edit_target, out / "normal_target.ppm")
for name, goal in (("image", AttackGoal.image()), ("style", AttackGoal.style_attack()),
                   ("object", AttackGoal.object_attack())):
    save_image(make_backdoor_target(s, goal), out / f"backdoor_{name}.ppm")
    print(f"{name:6s} eligible samples: {sum(goal.eligible(x) for x in samples)}")

# %%
# Multimodal poisoning with adversarial negatives
# -----------------------------------------------
config = PoisonConfig(poison_rate=0.1, visual=BadNet(), textual=TextTriggerSpec("word"),
                      adversarial_negatives=True, neg_rate=0.05, seed=0)
ds = poison(samples, config, AttackGoal.image())
print("role counts:", ds.role_counts)

# Manifests are plain TSV with PPM payloads and round-trip exactly.
path = write_manifest(ds, out / "manifest.tsv")
back = read_manifest(path)
print("round trip roles equal:", [e.role for e in back.entries] == [e.role for e in ds.entries])
print(path.read_text().splitlines()[0])

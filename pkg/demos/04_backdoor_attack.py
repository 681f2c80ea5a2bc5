"""
A textual backdoor end to end
=============================

Poison 10% of the training set with the Word trigger and the pixel-cat
ImageAttack goal, train, then measure the attack success rate (ASR) on
triggered test prompts and the error attack rate (EAR) on clean ones.

Training uses 1500 steps to keep the demo to a few minutes; the acceptance
suite uses 3000.
"""
from pathlib import Path

import numpy as np

from editpoison import experiments as ex
from editpoison.config import parse_config
from editpoison.imagecore import save_image

out = Path("demo_output/backdoor")
out.mkdir(parents=True, exist_ok=True)

cfg = parse_config("train.steps = 1500\nvisual.kind = none\ntext.kind = word\n")
study = ex.Study.from_config(cfg)
method, goal = study.method("word"), study.goal("image")



def progress(step, loss):
    if step % 500 == 0:
        print(f"step {step} loss {loss:.4f}")


result = study.run(method, goal, progress=progress)
report = study.evaluate(result.model, method, goal)
print(f"ASR {report.asr:.1f}%  EAR {report.ear:.1f}%  "
      f"text_align {report.text_align:.3f}  image_preserve {report.image_preserve:.3f}")

# Side by side: clean prompt vs the same prompt with "trigger" prepended.
sched = ex.train_config_from(cfg).schedule()
few = study.test_samples[:6]
clean = ex.generate(result.model, few, sched, "clean", method)
trig = ex.generate(result.model, few, sched, "triggered", method)
for i, s in enumerate(few):
    save_image(np.concatenate([s.input_image, clean[i], trig[i]], axis=1), out / f"pair_{i}.ppm")
print("pair_*.ppm shows input | clean-prompt edit | triggered edit")

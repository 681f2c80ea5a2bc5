"""
Sweeps and the adversarial-negative ablation
============================================

How attack success depends on the poison rate and on training length, and
what single-trigger negatives do to a multimodal backdoor. The default run
uses reduced settings so it finishes in reasonable time on a laptop.

Pass ``--full`` to use the acceptance-suite settings (3000 steps, about
twenty minutes per study on one core). Results are cached under
``demo_output/cache`` so reruns are instant.
"""
import sys
from pathlib import Path

from editpoison import experiments as ex
from editpoison.config import parse_config
from editpoison.evalkit import emit_plots, write_rows

full = "--full" in sys.argv
out = Path("demo_output/studies")
out.mkdir(parents=True, exist_ok=True)

steps = 3000 if full else 800
marks = [0, 100, 250, 500, 1000, 2000, 3000] if full else [0, 100, 250, 500, 800]
cfg = parse_config(f"train.steps = {steps}\ncache.dir = demo_output/cache\n")
study = ex.Study.from_config(cfg)
show = lambda label, rep: print(f"  {label:24s} ASR {rep.asr:5.1f}  EAR {rep.ear:5.1f}")  # noqa: E731

# %%
# Poison rate
# -----------
print("poison-rate sweep")
rows = ex.sweep_rate(study, ["badnet", "word"], [0.01, 0.02, 0.06, 0.10], progress=show)
write_rows(out / "sweep_rate.csv", ["method", "rate", "asr_pct", "ear_pct"], rows)
emit_plots(ex.group_rows(rows), out / "asr_vs_rate.svg", "ASR vs poison rate", "poison rate")
for m, pts in ex.group_rows(rows).items():
    print(f"  {m}: first rate reaching 80% ASR = {ex.first_reaching(pts, 80.0)}")

# %%
# Training steps
# --------------
print("training-step sweep")
rows = ex.sweep_steps(study, ["badnet", "word"], marks, progress=show)
write_rows(out / "sweep_steps.csv", ["method", "step", "asr_pct", "ear_pct"], rows)
emit_plots(ex.group_rows(rows), out / "asr_vs_steps.svg", "ASR vs training steps", "training step")

# %%
# Adversarial negatives
# ---------------------
# Without negatives the multimodal model tends to answer to the text trigger
# alone; with them, only the joint trigger should fire.
print("ablation")
rows = ex.ablate_adversarial(study, "badnet+word")
write_rows(out / "ablation.csv", ex.ABLATION_HEADER, rows)
for run, cond, pct in rows:
    print(f"  {run:18s} {cond:12s} {pct:5.1f}%")

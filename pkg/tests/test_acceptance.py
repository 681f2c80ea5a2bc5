"""Acceptance gate: exact property suites (1-6) and toy-scale trend suite (7-14).

Each test prints one ``[ACCEPT nn] PASS|FAIL`` line; the lines are repeated
in the terminal summary. Thresholds and tolerances are frozen below.

The trend suite trains about twenty 3000-step models (roughly two minutes
each on one CPU core). Finished runs are cached on disk, keyed by every
input that affects them, under ``$EDITPOISON_CACHE`` or ``.cache/acceptance``
in the repository; delete that directory to force a full recomputation.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from editpoison import experiments as ex
from editpoison import nncore as nn
from editpoison.cli import main as cli_main
from editpoison.config import parse_config
from editpoison.denoiser import Denoiser, DenoiserConfig
from editpoison.diffusion import batch_predict, make_schedule, q_sample, total_batch_loss
from editpoison.poisonset import VOCAB, AttackGoal, PoisonConfig, Role, gen_toy_dataset, poison
from editpoison.trigger_visual import CORNERS, BadNet, Blend, WaNet
from editpoison.trigger_textual import TextTriggerSpec

# --------------------------------------------------------------------------- frozen settings

GOALS = ("image", "style", "object")
SWEEP_GOAL = "image"
STEP_MARKS = (0, 100, 250, 500, 1000, 2000, 3000)
SWEEP_RATES = (0.01, 0.02, 0.06, 0.10)
REACH_LEVEL = 80.0

CLEAN_PRESERVE_MIN = 0.90
CLEAN_ALIGN_MIN = 0.85
WORD_ASR_MIN, WORD_EAR_MAX = 90.0, 10.0
BADNET_ASR_MIN, BADNET_OVER_COLOR_MIN = 70.0, 15.0
MULTI_SLACK = 2.0
ABL_TEXT_SHARE_MIN = 0.5
ABL_SINGLE_MAX, ABL_DUAL_MIN = 20.0, 90.0
# "matches" in the trade-off comparison: proxies equal within this much
PROXY_TIE = 0.01

RESULTS: list[str] = []


def record(n: int, ok: bool, text: str) -> None:
    line = f"[ACCEPT {n:02d}] {'PASS' if ok else 'FAIL'}  {text}"
    RESULTS.append(line)
    print(line)


# --------------------------------------------------------------------------- shared trained runs


@pytest.fixture(scope="module")
def study():
    cache = os.environ.get("EDITPOISON_CACHE") or str(Path(__file__).resolve().parent.parent / ".cache" / "acceptance")
    cfg = parse_config("").updated(cache__dir=cache)
    return ex.Study.from_config(cfg)


_RUNS: dict = {}
_REPORTS: dict = {}


def trained(study, method, goal, rate=None, adversarial=False):
    rate = study.cfg.float("poison.rate") if rate is None else rate
    key = (method, goal, rate, adversarial)
    if key not in _RUNS:
        m = study.method(method) if method else None
        # every run keeps the sweep snapshots so the step sweep can reuse it
        _RUNS[key] = study.run(m, study.goal(goal), rate=rate, marks=STEP_MARKS, adversarial=adversarial)
    return _RUNS[key]


def report(study, method, goal, rate=None, adversarial=False, step=None, single=False):
    rate = study.cfg.float("poison.rate") if rate is None else rate
    key = (method, goal, rate, adversarial, step, single)
    if key not in _REPORTS:
        res = trained(study, method, goal, rate, adversarial)
        model = res.model if step is None else res.checkpoints[step]
        _REPORTS[key] = study.evaluate(model, study.method(method) if method else None, study.goal(goal),
                                       single_triggers=single)
    return _REPORTS[key]


def averaged(study, method):
    reps = [report(study, method, g) for g in GOALS]
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reps]))  # noqa: E731
    per_goal = ", ".join(f"{r.goal} {r.asr:.0f}/{r.ear:.0f}" for r in reps)
    return mean("asr"), mean("ear"), mean("image_preserve"), mean("text_align"), per_goal


# --------------------------------------------------------------------------- property suites


def test_01_trigger_locality():
    rng = np.random.default_rng(101)
    violations = 0
    for k in range(1000):
        h, w = (int(v) for v in rng.integers(4, 33, size=2))
        img = rng.random((h, w, 3), dtype=np.float32)
        trig = BadNet(patch_frac=float(rng.uniform(0.05, 0.6)), corner=CORNERS[k % 4],
                      pattern_seed=int(rng.integers(1000)), cell=int(rng.integers(1, 4)))
        out = trig.apply(img)
        outside = ~trig.footprint(h, w)
        violations += int(np.any(out[outside] != img[outside]))
    record(1, violations == 0, f"BadNet locality: {violations} violations in 1000 random images (need 0)")
    assert violations == 0


def test_02_identity_limits():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        img = rng.random((16, 16, 3), dtype=np.float32)
        for trig in (Blend(alpha=0.0, pattern_seed=int(rng.integers(99))),
                     WaNet(strength=0.0, seed=int(rng.integers(99)))):
            worst = max(worst, float(np.max(np.abs(trig.apply(img) - img))))
    ok = worst <= 1e-6
    record(2, ok, f"Blend a=0 / WaNet strength=0 identity: max deviation {worst:.2e} (need <= 1e-6)")
    assert ok


def test_03_gradient_correctness():
    rng = np.random.default_rng(303)
    small = DenoiserConfig(vocab_size=len(VOCAB), hidden=8, text_dim=8, time_dim=8, cond_dim=8)
    model = Denoiser(small, seed=3).astype(np.float64)
    samples = gen_toy_dataset(16, 16, seed=3)
    ds = poison(samples, PoisonConfig(0.25, visual=BadNet(), textual=TextTriggerSpec("word"),
                                      adversarial_negatives=True, neg_rate=0.125, lam=0.7), AttackGoal.image())
    batch = ds.entries[:6]
    sched = make_schedule()
    t = rng.integers(1, 51, size=len(batch))
    eps = rng.standard_normal((len(batch), 16, 16, 3))

    def loss():
        per = nn.per_sample_mse(batch_predict(model, batch, t, eps, sched), np.stack([e.target for e in batch]))
        return total_batch_loss(per, [e.role for e in batch], [e.lam for e in batch])

    err = nn.grad_check(loss, model.params, eps=1e-3, n_coords=200, seed=3)
    ok = model.n_params <= 5000 and err < 1e-3
    record(3, ok, f"grad_check on {model.n_params}-param model, 200 coords: max rel err {err:.2e} (need < 1e-3)")
    assert ok


def test_04_forward_process_statistics():
    sched = make_schedule(50, 1e-4, 0.02)
    t = sched.T // 2
    rng = np.random.default_rng(404)
    x0 = rng.random((8, 8, 3), dtype=np.float32)
    draws = np.stack([q_sample(x0, t, rng.standard_normal(x0.shape), sched) for _ in range(10_000)])
    var = float(np.mean(np.var(draws.astype(np.float64), axis=0)))
    want = 1.0 - sched.alpha_bar[t]
    rel = abs(var - want) / want
    ok = rel <= 0.05
    record(4, ok, f"q_sample variance at t={t}: {var:.5f} vs 1-alpha_bar {want:.5f}, rel diff {rel:.3%} (need <= 5%)")
    assert ok


def test_05_loss_composition():
    rng = np.random.default_rng(505)
    worst = 0.0
    roles_all = list(Role)
    for _ in range(20):
        b = int(rng.integers(2, 24))
        roles = [roles_all[int(i)] for i in rng.integers(0, len(roles_all), size=b)]
        lams = rng.uniform(0.1, 3.0, size=b)
        losses = rng.random(b)
        clean = [l for l, r in zip(losses, roles) if r is not Role.BACKDOOR]
        bd = [lam * l for l, r, lam in zip(losses, roles, lams) if r is Role.BACKDOOR]
        hand = (sum(clean) / len(clean) if clean else 0.0) + (sum(bd) / len(bd) if bd else 0.0)
        as_float = total_batch_loss(losses, roles, lams)
        as_tensor = float(total_batch_loss(nn.Tensor(losses, requires_grad=True), roles, lams).data)
        worst = max(worst, abs(as_float - hand), abs(as_tensor - hand))
    ok = worst <= 1e-12
    record(5, ok, f"total_batch_loss vs hand-computed on 20 batches: max abs diff {worst:.1e} (need <= 1e-12)")
    assert ok


def test_06_determinism(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text("dataset.n = 80\ndataset.n_test = 10\ntrain.steps = 40\n"
                   "visual.kind = badnet\ntext.kind = word\npoison.adversarial = true\n")
    for out in ("a", "b"):
        for cmd in ("gen-data", "poison", "train", "eval"):
            assert cli_main([cmd, "--config", str(cfg), "--out", str(tmp_path / out), "--seed", "7"]) == 0
    files = ("data/manifest.tsv", "poisoned/manifest.tsv", "train/model.ckpt", "train/loss.csv",
             "eval/report.csv", "eval/verdicts.tsv")
    differ = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    record(6, not differ, f"two seeded pipeline runs byte-identical over {len(files)} artifacts; differing: {differ or 'none'}")
    assert not differ


# --------------------------------------------------------------------------- trend suite


def test_07_clean_functionality(study):
    rep = report(study, None, "image", rate=0.0)
    ok = rep.image_preserve >= CLEAN_PRESERVE_MIN and rep.text_align >= CLEAN_ALIGN_MIN
    record(7, ok, f"rate-0 model: image_preserve {rep.image_preserve:.3f} (need >= {CLEAN_PRESERVE_MIN}), "
                  f"text_align {rep.text_align:.3f} (need >= {CLEAN_ALIGN_MIN})")
    assert ok


def test_08_textual_attack_strength(study):
    asr, ear, _, _, per = averaged(study, "word")
    ok = asr >= WORD_ASR_MIN and ear <= WORD_EAR_MAX
    record(8, ok, f"Word @0.10 avg ASR {asr:.1f} (need >= {WORD_ASR_MIN}), avg EAR {ear:.1f} "
                  f"(need <= {WORD_EAR_MAX}); ASR/EAR per goal: {per}")
    assert ok


def test_09_visual_attack_strength(study):
    b_asr, _, _, _, b_per = averaged(study, "badnet")
    c_asr, _, _, _, c_per = averaged(study, "color")
    ok = b_asr >= BADNET_ASR_MIN and b_asr - c_asr >= BADNET_OVER_COLOR_MIN
    record(9, ok, f"BadNet avg ASR {b_asr:.1f} (need >= {BADNET_ASR_MIN}); Color avg ASR {c_asr:.1f}, gap "
                  f"{b_asr - c_asr:.1f} (need >= {BADNET_OVER_COLOR_MIN}); BadNet {b_per}; Color {c_per}")
    assert ok


def test_10_multimodal_superiority(study):
    m_asr, m_ear, _, _, m_per = averaged(study, "badnet+word")
    b_asr = averaged(study, "badnet")[0]
    w_asr, w_ear = averaged(study, "word")[:2]
    ok = m_asr >= max(b_asr, w_asr) - MULTI_SLACK and m_ear <= w_ear
    record(10, ok, f"BadNet+Word avg ASR {m_asr:.1f} vs max(BadNet {b_asr:.1f}, Word {w_asr:.1f}) - {MULTI_SLACK}; "
                   f"EAR {m_ear:.1f} vs Word EAR {w_ear:.1f}; per goal: {m_per}")
    assert ok


def _reach(points):
    x = ex.first_reaching(points, REACH_LEVEL)
    return float("inf") if x is None else x


def test_11_convergence_ordering(study):
    curves = {}
    for method in ("word", "badnet"):
        curves[method] = [(s, report(study, method, SWEEP_GOAL, step=s).asr) for s in STEP_MARKS]
    final_match = all(curves[m][-1][1] == report(study, m, SWEEP_GOAL).asr for m in curves)
    w, b = _reach(curves["word"]), _reach(curves["badnet"])
    ok = w < b and final_match
    fmt = lambda c: " ".join(f"{s}:{a:.0f}" for s, a in c)  # noqa: E731
    record(11, ok, f"first step at {REACH_LEVEL:.0f}% ASR (smoothed): Word {w:g} < BadNet {b:g}; "
                   f"final points match main eval: {final_match}; Word [{fmt(curves['word'])}] "
                   f"BadNet [{fmt(curves['badnet'])}]")
    assert ok


def test_12_poison_rate_ordering(study):
    curves = {}
    for method in ("word", "badnet"):
        curves[method] = [(r, report(study, method, SWEEP_GOAL, rate=r).asr) for r in SWEEP_RATES]
    w, b = _reach(curves["word"]), _reach(curves["badnet"])
    ok = w < b
    fmt = lambda c: " ".join(f"{r:g}:{a:.0f}" for r, a in c)  # noqa: E731
    record(12, ok, f"lowest rate at {REACH_LEVEL:.0f}% ASR: Word {w:g} < BadNet {b:g}; "
                   f"Word [{fmt(curves['word'])}] BadNet [{fmt(curves['badnet'])}]")
    assert ok


def test_13_adversarial_ablation(study):
    plain = report(study, "badnet+word", SWEEP_GOAL, adversarial=False, single=True)
    adv = report(study, "badnet+word", SWEEP_GOAL, adversarial=True, single=True)
    t0, v0 = plain.extra["text_only"], plain.extra["visual_only"]
    t1, v1 = adv.extra["text_only"], adv.extra["visual_only"]
    ok_plain = t0 >= ABL_TEXT_SHARE_MIN * plain.asr
    ok_adv = t1 <= ABL_SINGLE_MAX and v1 <= ABL_SINGLE_MAX and adv.asr >= ABL_DUAL_MIN
    record(13, ok_plain and ok_adv,
           f"without negatives: dual {plain.asr:.0f}, text-only {t0:.0f} (need >= {ABL_TEXT_SHARE_MIN:g} x dual), "
           f"visual-only {v0:.0f}; with negatives: dual {adv.asr:.0f} (need >= {ABL_DUAL_MIN:g}), "
           f"text-only {t1:.0f}, visual-only {v1:.0f} (need each <= {ABL_SINGLE_MAX:g})")
    assert ok_plain and ok_adv


def test_14_tradeoff_direction(study):
    pts = {m: averaged(study, m)[2:4] for m in ("badnet", "word", "badnet+word")}
    (bp, ba), (wp, wa), (mp, ma) = pts["badnet"], pts["word"], pts["badnet+word"]
    dominates = bp >= wp - PROXY_TIE and ba >= wa - PROXY_TIE
    between = all(min(x, y) - PROXY_TIE <= z <= max(x, y) + PROXY_TIE for x, y, z in ((bp, wp, mp), (ba, wa, ma)))
    ok = dominates and between
    fmt = lambda p: f"({p[0]:.3f}, {p[1]:.3f})"  # noqa: E731
    record(14, ok, f"clean (image_preserve, text_align): BadNet {fmt(pts['badnet'])} >= Word {fmt(pts['word'])} "
                   f"within {PROXY_TIE}: {dominates}; BadNet+Word {fmt(pts['badnet+word'])} between: {between}")
    assert ok

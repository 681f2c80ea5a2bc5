import math

import numpy as np
import pytest

from editpoison import experiments as ex
from editpoison.config import parse_config
from editpoison.denoiser import Denoiser
from editpoison.poisonset import GoalKind
from editpoison.trigger_visual import BadNet, Blend

TINY = """
dataset.n = 40
dataset.n_test = 8
train.steps = 6
train.batch = 4
train.hidden = 8
train.T = 10
"""


@pytest.fixture
def cfg():
    return parse_config(TINY)


@pytest.fixture
def study(cfg):
    return ex.Study.from_config(cfg)


# --------------------------------------------------------------------------- parsing


def test_parse_single_and_combined_methods():
    m = ex.parse_method("badnet")
    assert isinstance(m.visual, BadNet) and m.textual is None and not m.multimodal
    m = ex.parse_method("word")
    assert m.visual is None and m.textual.kind == "word"
    m = ex.parse_method("BadNet+Mark")
    assert m.name == "badnet+mark" and m.multimodal
    assert m.textual.placement == "append"


@pytest.mark.parametrize("bad", ["", "foo", "badnet+blend", "word+mark", "badnet+word+mark", "+"])
def test_parse_method_rejects(bad):
    with pytest.raises(ex.ExperimentError):
        ex.parse_method(bad)


def test_parse_method_takes_params_from_matching_config():
    cfg = parse_config("visual.kind = blend\nvisual.alpha = 0.35\ntext.kind = word\ntext.placement = append")
    m = ex.parse_method("blend+word", cfg)
    assert m.visual == Blend(alpha=0.35)
    assert m.textual.placement == "append"
    # a different visual kind ignores the blend parameters
    assert ex.parse_method("badnet", cfg).visual == BadNet()


def test_set_method_and_method_from_config(cfg):
    c2 = ex.set_method(cfg, "color+badt2i")
    assert c2.str("visual.kind") == "color" and c2.str("text.kind") == "badt2i"
    assert ex.method_from_config(c2).name == "color+badt2i"
    c3 = ex.set_method(cfg, "word")
    assert c3.str("visual.kind") == "none"
    with pytest.raises(ex.ExperimentError):
        ex.method_from_config(cfg.updated(visual__kind="none", text__kind="none"))


@pytest.mark.parametrize("kind", ["image", "style", "object"])
def test_goal_from_config(cfg, kind):
    assert ex.goal_from_config(cfg, kind).kind is GoalKind(kind)


def test_goal_from_config_rejects(cfg):
    with pytest.raises(ex.ExperimentError):
        ex.goal_from_config(cfg, "everything")


def test_splits_are_deterministic_and_sized(cfg):
    tr, te = ex.make_splits(cfg)
    assert len(tr) == 32 and len(te) == 8
    tr2, te2 = ex.make_splits(cfg)
    assert [s.id for s in te] == [s.id for s in te2]
    assert np.array_equal(tr[5].input_image, tr2[5].input_image)
    with pytest.raises(ex.ExperimentError):
        ex.make_splits(cfg.updated(dataset__n_test=40))


# --------------------------------------------------------------------------- smoothing helpers


def test_monotone_smooth_is_suffix_min():
    vals = [10.0, 90.0, 60.0, 85.0, 100.0, 95.0]
    out = ex.monotone_smooth(vals)
    assert out == [10.0, 60.0, 60.0, 85.0, 95.0, 95.0]
    assert out[-1] == vals[-1]
    assert all(a <= b for a, b in zip(out, out[1:]))


def test_first_reaching_uses_smoothed_curve():
    pts = [(0, 0.0), (100, 85.0), (250, 40.0), (500, 82.0), (1000, 90.0)]
    assert ex.first_reaching(pts, 80.0) == 500
    assert ex.first_reaching(pts, 95.0) is None


# --------------------------------------------------------------------------- runs and cache


def test_clean_runs_share_a_cache_key(study):
    g_img, g_sty = study.goal("image"), study.goal("style")
    tcfg, mcfg = ex.train_config_from(study.cfg), ex.model_config_from(study.cfg)
    k = lambda name, goal, rate: ex.run_key(  # noqa: E731
        study.train_samples, ex.poison_config_from(study.cfg, study.method(name), rate), goal, tcfg, mcfg
    )
    assert k("badnet", g_img, 0.0) == k("word", g_sty, 0.0)
    assert k("badnet", g_img, 0.1) != k("word", g_img, 0.1)
    assert k("badnet", g_img, 0.1) != k("badnet", g_sty, 0.1)
    assert k("badnet", g_img, 0.1) != k("badnet", g_img, 0.2)


def test_cache_roundtrip_and_mark_extension(study, tmp_path):
    m, g = study.method("word"), study.goal("image")
    pcfg = ex.poison_config_from(study.cfg, m, 0.25)
    tcfg, mcfg = ex.train_config_from(study.cfg), ex.model_config_from(study.cfg)
    first = ex.train_run(study.train_samples, pcfg, g, tcfg, mcfg, [0, 3], cache_dir=tmp_path)
    again = ex.train_run(study.train_samples, pcfg, g, tcfg, mcfg, [3], cache_dir=tmp_path)
    assert again.model.to_bytes() == first.model.to_bytes()
    assert again.checkpoints[3].to_bytes() == first.checkpoints[3].to_bytes()
    assert again.curve == first.curve
    # a new mark triggers a retrain that reproduces the same final model
    more = ex.train_run(study.train_samples, pcfg, g, tcfg, mcfg, [2, 3], cache_dir=tmp_path)
    assert more.model.to_bytes() == first.model.to_bytes()
    assert set(more.checkpoints) == {2, 3}


def test_final_checkpoint_equals_model(study):
    res = study.run(study.method("badnet"), study.goal("image"), marks=[6])
    assert res.checkpoints[6].to_bytes() == res.model.to_bytes()


# --------------------------------------------------------------------------- evaluation


def test_evaluate_random_init_is_well_formed(study):
    model = Denoiser(ex.model_config_from(study.cfg), seed=0)
    m = study.method("badnet+word")
    rep = study.evaluate(model, m, study.goal("image"), single_triggers=True)
    assert rep.n_triggered == rep.n_clean == 8
    for v in (rep.asr, rep.ear, rep.extra["text_only"], rep.extra["visual_only"]):
        assert 0.0 <= v <= 100.0
    assert 0.0 <= rep.image_preserve <= 1.0 and 0.0 <= rep.text_align <= 1.0


def test_evaluate_restricts_to_eligible_samples(study):
    model = Denoiser(ex.model_config_from(study.cfg), seed=0)
    g = study.goal("object")
    rep = study.evaluate(model, study.method("word"), g)
    assert rep.n_clean == sum(g.eligible(s) for s in study.test_samples)


def test_evaluate_without_method_has_no_asr(study):
    model = Denoiser(ex.model_config_from(study.cfg), seed=0)
    rep = study.evaluate(model, None, study.goal("image"))
    assert math.isnan(rep.asr) and rep.n_triggered == 0


def test_conditions_use_distinct_noise(study):
    model = Denoiser(ex.model_config_from(study.cfg), seed=0)
    sched = ex.train_config_from(study.cfg).schedule()
    m = study.method("word")
    s = study.test_samples[:2]
    a = ex.generate(model, s, sched, "clean", m)
    b = ex.generate(model, s, sched, "clean", m)
    c = ex.generate(model, s, sched, "triggered", m)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    with pytest.raises(ex.ExperimentError):
        ex.generate(model, s, sched, "sideways", m)


# --------------------------------------------------------------------------- studies


def test_sweep_rate_shape(study):
    rows = ex.sweep_rate(study, ["badnet", "word"], [0.0, 0.25])
    assert len(rows) == 4
    assert [r[:2] for r in rows] == [["badnet", 0.0], ["badnet", 0.25], ["word", 0.0], ["word", 0.25]]
    with pytest.raises(ex.ExperimentError):
        ex.sweep_rate(study, ["badnet"], [1.5])
    with pytest.raises(ex.ExperimentError):
        ex.sweep_rate(study, ["badnet"], [])


def test_sweep_steps_shape_and_validation(study):
    rows = ex.sweep_steps(study, ["word"], [0, 2, 4])
    assert [r[1] for r in rows] == [0, 2, 4]
    with pytest.raises(ex.ExperimentError):
        ex.sweep_steps(study, ["word"], [0, 4, 4])


def test_ablation_has_six_rows(study):
    rows = ex.ablate_adversarial(study, "badnet+word")
    assert len(rows) == 6
    assert {(r[0], r[1]) for r in rows} == {
        (run, cond) for run in ("without_negatives", "with_negatives") for cond in ("dual", "text_only", "visual_only")
    }
    with pytest.raises(ex.ExperimentError):
        ex.ablate_adversarial(study, "word")


def test_group_rows():
    rows = [["a", 0.1, 50.0, 0.0], ["a", 0.2, 60.0, 0.0], ["b", 0.1, 70.0, 1.0]]
    assert ex.group_rows(rows) == {"a": [(0.1, 50.0), (0.2, 60.0)], "b": [(0.1, 70.0)]}

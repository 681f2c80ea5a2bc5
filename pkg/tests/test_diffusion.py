import numpy as np
import pytest

from editpoison import nncore as nn
from editpoison.denoiser import Denoiser, DenoiserConfig
from editpoison.diffusion import (
    TrainRunConfig,
    batch_predict,
    make_schedule,
    q_sample,
    sample,
    sample_batch,
    total_batch_loss,
    train,
    training_loss,
    write_loss_curve,
)
from editpoison.imagecore import mse
from editpoison.poisonset import VOCAB, AttackGoal, PoisonConfig, PoisonedDataset, Role, TrainEntry, gen_toy_dataset, poison
from editpoison.trigger_textual import tokenize
from editpoison.trigger_visual import BadNet

# exact rational product of (1 - beta_s) for the default linear schedule
ALPHA_BAR_50 = 0.6029515973297149
ALPHA_BAR_25 = 0.8827129294402375


@pytest.fixture(scope="module")
def sched():
    return make_schedule(50, 1e-4, 0.02)


@pytest.fixture(scope="module")
def model():
    return Denoiser(DenoiserConfig(vocab_size=len(VOCAB), hidden=8), seed=0)


def test_schedule_values(sched):
    assert sched.alpha_bar[1] == pytest.approx(1 - 1e-4, abs=1e-15)
    assert sched.alpha_bar[50] == pytest.approx(ALPHA_BAR_50, rel=1e-12)
    assert sched.alpha_bar[25] == pytest.approx(ALPHA_BAR_25, rel=1e-12)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(np.diff(sched.beta[1:]) > 0)
    assert np.all((sched.beta[1:] > 0) & (sched.beta[1:] < 1))
    np.testing.assert_allclose(sched.alpha, 1 - sched.beta)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (50, 0.0, 0.02), (50, 0.02, 0.01), (50, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_posterior_coefficients_positive(sched):
    for t in range(2, sched.T + 1):
        c0, ct, var = sched.posterior(t)
        assert c0 > 0 and ct > 0 and var > 0
    c0, ct, var = sched.posterior(1)
    assert c0 == pytest.approx(1.0) and ct == 0.0 and var == 0.0


def test_posterior_mean_is_unbiased_for_x0(sched):
    # E[x_{t-1} | x_0] via the posterior mean, averaged over x_t, must equal sqrt(ab_{t-1}) x0
    for t in (2, 10, 50):
        c0, ct, _ = sched.posterior(t)
        assert c0 + ct * np.sqrt(sched.alpha_bar[t]) == pytest.approx(np.sqrt(sched.alpha_bar[t - 1]))


def test_q_sample_zero_noise(sched, rand_image):
    x = rand_image()
    out = q_sample(x, 20, np.zeros_like(x), sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[20]) * (2 * x - 1), atol=1e-6)


def test_q_sample_small_t_close_to_x0(rand_image, rng):
    s = make_schedule(10, 1e-8, 1e-6)
    x = rand_image()
    out = q_sample(x, 1, rng.standard_normal(x.shape), s)
    np.testing.assert_allclose(out, 2 * x - 1, atol=1e-3)


def test_q_sample_variance_monte_carlo(sched):
    rng = np.random.default_rng(0)
    t = sched.T // 2
    x0 = np.full((10_000, 1, 1, 3), 0.3, dtype=np.float32)
    draws = q_sample(x0, t, rng.standard_normal(x0.shape), sched)
    var = draws.var(axis=0).mean()
    assert abs(var - (1 - sched.alpha_bar[t])) / (1 - sched.alpha_bar[t]) < 0.05


def test_q_sample_errors(sched, rand_image):
    x = rand_image()
    with pytest.raises(ValueError):
        q_sample(x, 0, np.zeros_like(x), sched)
    with pytest.raises(ValueError):
        q_sample(x, 51, np.zeros_like(x), sched)
    with pytest.raises(ValueError):
        q_sample(x, 3, np.zeros((2, 2, 3)), sched)


def entry(rng, role=Role.CLEAN, lam=1.0):
    s = gen_toy_dataset(1, 16, int(rng.integers(1000)))[0]
    return TrainEntry(s.id, s.input_image, tokenize(s.prompt, VOCAB), s.edit_target, role, lam)


def test_training_loss_matches_independent_mse(model, sched, rng):
    e = entry(rng)
    eps = rng.standard_normal(e.input_image.shape).astype(np.float32)
    loss = training_loss(model, e, 17, eps, sched)
    x_t = np.sqrt(sched.alpha_bar[17]) * (2 * e.input_image - 1) + np.sqrt(1 - sched.alpha_bar[17]) * eps
    pred = model.forward(x_t[None], [17], (2 * e.input_image - 1)[None], [e.prompt.tokens]).data[0]
    assert float(loss.data) == pytest.approx(mse(pred, e.target), rel=1e-5)


def test_training_loss_zero_when_prediction_is_target(model, sched, rng):
    e = entry(rng)
    eps = rng.standard_normal(e.input_image.shape).astype(np.float32)
    pred = batch_predict(model, [e], [5], eps[None], sched).data[0]
    e.target = pred
    assert float(training_loss(model, e, 5, eps, sched).data) == 0.0


def test_training_loss_gradient(sched, rng):
    m = Denoiser(DenoiserConfig(vocab_size=len(VOCAB), hidden=8, text_dim=8, time_dim=8, cond_dim=8), seed=1)
    m = m.astype(np.float64)
    e = entry(rng)
    eps = rng.standard_normal(e.input_image.shape)
    assert nn.grad_check(lambda: training_loss(m, e, 9, eps, sched), m.params) < 1e-3


def test_visual_backdoor_uses_clean_prompt(model, sched, monkeypatch):
    samples = gen_toy_dataset(40, 16, 0)
    ds = poison(samples, PoisonConfig(0.5, visual=BadNet()), AttackGoal.image())
    bd = next(e for e in ds.entries if e.role is Role.BACKDOOR)
    src = next(s for s in samples if s.id == bd.id)
    seen = {}
    orig = model.forward

    def spy(x_t, t, source, prompts):
        seen.update(source=source, prompts=prompts)
        return orig(x_t, t, source, prompts)

    monkeypatch.setattr(model, "forward", spy)
    batch_predict(model, [bd], [3], np.zeros((1, 16, 16, 3), np.float32), sched)
    assert tuple(seen["prompts"][0]) == tokenize(src.prompt, VOCAB).tokens
    np.testing.assert_allclose(seen["source"][0], 2 * bd.input_image - 1)
    assert not np.allclose(bd.input_image, src.input_image)


# --------------------------------------------------------------- loss composition

ROLES = [Role.CLEAN, Role.BACKDOOR, Role.ADV_TEXT_ONLY, Role.BACKDOOR, Role.ADV_VISUAL_ONLY]


def test_lambda_zero_is_clean_mean():
    losses = [1.0, 5.0, 2.0, 7.0, 3.0]
    assert total_batch_loss(losses, ROLES, [0.0] * 5) == pytest.approx(2.0)


def test_all_backdoor_batch_is_backdoor_mean():
    assert total_batch_loss([1.0, 2.0, 6.0], [Role.BACKDOOR] * 3, [1.0] * 3) == pytest.approx(3.0)


def test_mixed_batch_hand_computed():
    losses = [1.0, 5.0, 2.0, 7.0, 3.0]
    # clean mean (1 + 2 + 3) / 3 = 2; backdoor mean (5 + 7) / 2 = 6; lambda 0.5
    assert total_batch_loss(losses, ROLES, [0.5] * 5) == pytest.approx(2.0 + 0.5 * 6.0)


def test_empty_groups_contribute_zero():
    assert total_batch_loss([4.0, 2.0], [Role.CLEAN, Role.CLEAN], [3.0, 3.0]) == pytest.approx(3.0)
    assert total_batch_loss([], [], []) == 0.0


def test_tensor_and_float_paths_agree(rng):
    per = rng.random(5)
    t = nn.Tensor(per, requires_grad=True)
    out = total_batch_loss(t, ROLES, [0.7] * 5)
    assert float(out.data) == pytest.approx(total_batch_loss(per.tolist(), ROLES, [0.7] * 5), rel=1e-14)


# --------------------------------------------------------------- sampling and training


def test_sample_deterministic_and_in_range(model, sched, rng):
    e = entry(rng)
    a = sample(model, e.input_image, e.prompt, sched, seed=3)
    b = sample(model, e.input_image, e.prompt, sched, seed=3)
    c = sample(model, e.input_image, e.prompt, sched, seed=4)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert a.shape == (16, 16, 3) and a.min() >= 0 and a.max() <= 1


def test_sample_batch_independent_of_batchmates(model, sched, rng):
    e1, e2 = entry(rng), entry(rng)
    solo = sample_batch(model, [e1.input_image], [e1.prompt], sched, [7])[0]
    pair = sample_batch(model, [e1.input_image, e2.input_image], [e1.prompt, e2.prompt], sched, [7, 8])[0]
    np.testing.assert_allclose(solo, pair, atol=1e-5)


def test_overfit_single_triple_reproduces_target():
    rng = np.random.default_rng(0)
    e = entry(rng)
    e.target = np.ascontiguousarray(e.target[::-1])  # an arbitrary non-trivial target
    ds = PoisonedDataset([e] * 16)
    cfg = TrainRunConfig(total_steps=250, seed=0, lr=5e-3)
    result = train(ds, cfg)
    out = sample(result.model, e.input_image, e.prompt, cfg.schedule(), seed=1)
    assert mse(out, e.target) < 0.05


def test_train_is_deterministic_and_finite(tmp_path):
    samples = gen_toy_dataset(40, 16, 1)
    ds = poison(samples, PoisonConfig(0.1, visual=BadNet(), seed=1), AttackGoal.image())
    cfg = TrainRunConfig(total_steps=6, batch=8, seed=2)
    a = train(ds, cfg, checkpoint_steps=[0, 3, 6])
    b = train(ds, cfg, checkpoint_steps=[0, 3, 6])
    assert a.model.to_bytes() == b.model.to_bytes()
    assert sorted(a.checkpoints) == [0, 3, 6]
    assert a.checkpoints[6].to_bytes() == a.model.to_bytes()
    assert a.checkpoints[0].to_bytes() != a.model.to_bytes()
    assert all(np.isfinite(v) for row in a.curve for v in row)
    write_loss_curve(a.curve, tmp_path / "a.csv")
    write_loss_curve(b.curve, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "step,loss,clean_loss,backdoor_loss"
    assert len(lines) == 7


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train(PoisonedDataset([]), TrainRunConfig(total_steps=1))

"""DDPM schedule, forward noising, role-weighted training losses, sampling and training.

Images live in ``[0, 1]`` outside this module; the diffusion state is kept in
centered ``[-1, 1]`` coordinates. The network predicts the clean target image
directly, so every loss compares its output to an image target.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nncore as nn
from .denoiser import Denoiser
from .nncore import Tensor
from .poisonset import PoisonedDataset, Role, TrainEntry
from .trigger_textual import Prompt

CLEAN_ROLES = (Role.CLEAN, Role.ADV_VISUAL_ONLY, Role.ADV_TEXT_ONLY)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by timestep ``0..T``; index 0 is the noise-free state."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def posterior(self, t: int) -> tuple[float, float, float]:
        """Coefficients ``(c_x0, c_xt, var)`` of q(x_{t-1} | x_t, x_0)."""
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        b = self.beta[t]
        c_x0 = math.sqrt(ab_prev) * b / (1.0 - ab_t)
        c_xt = math.sqrt(self.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = (1.0 - ab_prev) / (1.0 - ab_t) * b
        return c_x0, c_xt, var


def make_schedule(T: int = 50, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T, beta, alpha, alpha_bar)


def to_centered(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) * 2.0 - 1.0


def from_centered(x) -> np.ndarray:
    return np.clip((np.asarray(x, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)


def q_sample(x0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """Noised state ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`` in centered coordinates.

    ``x0`` is a ``[0, 1]`` image (or batch); ``t`` a scalar or one step per
    sample of the batch.
    """
    x0 = to_centered(x0)
    eps = np.asarray(eps, dtype=np.float32)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {x0.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ValueError(f"t must be in [1, {sched.T}], got {t}")
    ab = sched.alpha_bar[t_arr].astype(np.float32)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# --------------------------------------------------------------------------- losses


def batch_predict(model: Denoiser, entries: Sequence[TrainEntry], t, eps, sched) -> Tensor:
    src = np.stack([e.input_image for e in entries])
    x_t = q_sample(src, np.asarray(t), eps, sched)
    return model.forward(x_t, t, to_centered(src), [e.prompt.tokens for e in entries])


def training_loss(model: Denoiser, entry: TrainEntry, t: int, eps, sched) -> Tensor:
    """Squared error between the entry's target and the prediction from its noised input.

    Clean and adversarial entries carry the clean edit as target; backdoor
    entries carry the backdoor target together with whichever triggered image
    and/or prompt the poisoning produced.
    """
    pred = batch_predict(model, [entry], [t], np.asarray(eps)[None], sched)
    return nn.mse_loss(pred, entry.target[None])


def group_weights(roles: Sequence[Role], lams: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample weights so that ``sum(w * L)`` = clean-group mean + backdoor-group mean of ``lam * L``."""
    is_bd = np.array([r is Role.BACKDOOR for r in roles])
    n_bd = int(is_bd.sum())
    n_cl = len(roles) - n_bd
    lams = np.asarray(lams, dtype=np.float64)
    w_clean = np.where(is_bd, 0.0, 1.0 / n_cl if n_cl else 0.0)
    w_bd = np.where(is_bd, 1.0 / n_bd if n_bd else 0.0, 0.0)
    return w_clean + w_bd * lams, w_clean, w_bd


def total_batch_loss(per_sample_losses, roles: Sequence[Role], lams: Sequence[float]):
    """Clean-group mean plus lambda-weighted backdoor-group mean.

    Accepts a ``(B,)`` Tensor (returns a scalar Tensor) or plain floats
    (returns a float). Empty role groups contribute 0.
    """
    w, _, _ = group_weights(roles, lams)
    if isinstance(per_sample_losses, Tensor):
        return nn.weighted_sum(per_sample_losses, w)
    return float(np.sum(np.asarray(per_sample_losses, dtype=np.float64) * w))


# --------------------------------------------------------------------------- sampling


def sample_batch(
    model: Denoiser,
    images: Sequence[np.ndarray],
    prompts: Sequence[Prompt | Sequence[int]],
    sched: DiffusionSchedule,
    seeds: Sequence[int],
) -> np.ndarray:
    """Ancestral sampling from pure noise; each sample draws noise from its own seed."""
    src = to_centered(np.stack(images))
    toks = [p.tokens if isinstance(p, Prompt) else tuple(p) for p in prompts]
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(src.shape[1:]) for r in rngs]).astype(np.float32)
    for t in range(sched.T, 0, -1):
        x0_hat = model.forward(x, np.full(len(src), t), src, toks).data * 2.0 - 1.0
        c_x0, c_xt, var = sched.posterior(t)
        mean = c_x0 * x0_hat + c_xt * x
        if t > 1:
            z = np.stack([r.standard_normal(src.shape[1:]) for r in rngs]).astype(np.float32)
            x = (mean + math.sqrt(var) * z).astype(np.float32)
        else:
            x = mean.astype(np.float32)
    return from_centered(x)


def sample(model: Denoiser, input_image, prompt, sched: DiffusionSchedule, seed: int) -> np.ndarray:
    return sample_batch(model, [input_image], [prompt], sched, [seed])[0]


def predict_x0(model: Denoiser, images, prompts, t: int, sched: DiffusionSchedule, seeds) -> np.ndarray:
    """One-shot clean-image prediction from the noised source at step ``t``."""
    src = np.stack(images)
    eps = np.stack([np.random.default_rng(s).standard_normal(src.shape[1:]) for s in seeds])
    x_t = q_sample(src, np.full(len(src), t), eps, sched)
    toks = [p.tokens if isinstance(p, Prompt) else tuple(p) for p in prompts]
    return model.forward(x_t, np.full(len(src), t), to_centered(src), toks).data


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainRunConfig:
    total_steps: int = 3000
    batch: int = 16
    lr: float = 2e-3
    seed: int = 0
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    clip_norm: float = 1.0
    eval_every: int = 500

    def __post_init__(self):
        if self.total_steps < 0 or self.batch < 1 or self.lr <= 0 or self.clip_norm <= 0:
            raise ValueError("training settings must be positive")

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)


@dataclass
class TrainResult:
    model: Denoiser
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    checkpoints: dict[int, Denoiser] = field(default_factory=dict)


def train(
    dataset: PoisonedDataset,
    cfg: TrainRunConfig,
    model: Denoiser | None = None,
    vocab_size: int | None = None,
    checkpoint_steps: Iterable[int] = (),
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minibatch Adam on the role-weighted loss; returns model, loss curve and snapshots.

    ``checkpoint_steps`` may include 0 (the initialization).
    """
    from .denoiser import DenoiserConfig

    entries = dataset.entries
    if not entries:
        raise ValueError("empty dataset")
    if model is None:
        if vocab_size is None:
            from .poisonset import VOCAB

            vocab_size = len(VOCAB)
        model = Denoiser(DenoiserConfig(vocab_size=vocab_size), seed=cfg.seed)
    sched = cfg.schedule()
    marks = set(checkpoint_steps)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = nn.Adam(model.params, lr=cfg.lr)
    result = TrainResult(model)
    if 0 in marks:
        result.checkpoints[0] = model.copy()
    order = rng.permutation(len(entries))
    cursor = 0
    shape = entries[0].input_image.shape
    for step in range(1, cfg.total_steps + 1):
        if cursor + cfg.batch > len(order):
            order = rng.permutation(len(entries))
            cursor = 0
        idx = order[cursor : cursor + cfg.batch]
        cursor += cfg.batch
        batch = [entries[i] for i in idx]
        t = rng.integers(1, sched.T + 1, size=len(batch))
        eps = rng.standard_normal((len(batch),) + shape).astype(np.float32)
        pred = batch_predict(model, batch, t, eps, sched)
        per = nn.per_sample_mse(pred, np.stack([e.target for e in batch]))
        roles = [e.role for e in batch]
        loss = total_batch_loss(per, roles, [e.lam for e in batch])
        opt.zero_grad()
        loss.backward()
        nn.clip_grad_norm(model.params.values(), cfg.clip_norm)
        opt.step()
        _, w_clean, w_bd = group_weights(roles, [1.0] * len(roles))
        result.curve.append(
            (step, float(loss.data), float(np.sum(w_clean * per.data)), float(np.sum(w_bd * per.data)))
        )
        if step in marks:
            result.checkpoints[step] = model.copy()
        if progress is not None:
            progress(step, float(loss.data))
    return result


def write_loss_curve(curve, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "clean_loss", "backdoor_loss"])
        for step, loss, cl, bd in curve:
            w.writerow([step, repr(loss), repr(cl), repr(bd)])

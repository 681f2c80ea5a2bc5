"""Experiment plumbing shared by the CLI and the demos.

Turns a :class:`RunConfig` into datasets, poisoned training sets, trained
models and evaluation reports, and runs the three studies (main table,
poison-rate sweep, training-step sweep, adversarial-negative ablation).

Training runs are pure functions of their inputs, so results can be cached
on disk under a key derived from everything that influences them.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import TrainResult, TrainRunConfig, DiffusionSchedule, sample_batch, train
from .evalkit import EvalReport, classify_output, compute_asr, functionality_proxies, summarize
from .poisonset import (
    VOCAB,
    AttackGoal,
    PoisonConfig,
    PoisonedDataset,
    Sample,
    clean_dataset,
    gen_toy_dataset,
    make_backdoor_target,
    poison,
    samples_hash,
    tokenize,
    trigger_sample,
)
from .trigger_textual import TEXT_KINDS, TextTriggerSpec
from .trigger_visual import (
    VISUAL_KINDS,
    VisualTriggerSpec,
    default_visual_spec,
    visual_spec_from_config,
)

# Bump whenever training or model code changes in a way that alters results.
CACHE_VERSION = 1

# Sub-seed tags so each evaluation condition draws independent sampler noise.
_COND_TAG = {"clean": 0, "triggered": 1, "visual_only": 2, "text_only": 3}


class ExperimentError(ValueError):
    pass


# --------------------------------------------------------------------------- config → objects


@dataclass(frozen=True)
class Method:
    """A trigger method: a visual trigger, a textual trigger, or both."""

    name: str
    visual: VisualTriggerSpec | None
    textual: TextTriggerSpec | None

    @property
    def multimodal(self) -> bool:
        return self.visual is not None and self.textual is not None


def parse_method(name: str, cfg: RunConfig | None = None, side: int = 16) -> Method:
    """Parse ``badnet``, ``word`` or ``<visual>+<textual>``.

    Visual parameters come from ``cfg`` when its ``visual.kind`` names the
    same trigger; otherwise the trigger's defaults for ``side`` are used.
    """
    parts = [p.strip().lower() for p in name.split("+") if p.strip()]
    if not parts or len(parts) > 2:
        raise ExperimentError(f"bad method {name!r}: expected <visual>, <textual> or <visual>+<textual>")
    visual = textual = None
    for part in parts:
        if part in VISUAL_KINDS and visual is None:
            if cfg is not None and cfg.get("visual.kind", "").strip().lower() == part:
                visual = visual_spec_from_config(cfg)
            else:
                visual = default_visual_spec(part, side)
        elif part in TEXT_KINDS and textual is None:
            placement = cfg.get("text.placement", "default") if cfg is not None else "default"
            kind_matches = cfg is not None and cfg.get("text.kind", "").strip().lower() == part
            textual = TextTriggerSpec(part, placement if kind_matches and placement != "default" else None)
        else:
            raise ExperimentError(f"bad method {name!r}: unknown or repeated trigger {part!r}")
    if len(parts) == 2 and (visual is None or textual is None):
        raise ExperimentError(f"bad method {name!r}: a combined method needs one visual and one textual trigger")
    return Method("+".join(parts), visual, textual)


def method_from_config(cfg: RunConfig) -> Method:
    parts = [cfg.str(k) for k in ("visual.kind", "text.kind") if cfg.str(k).lower() not in ("", "none")]
    if not parts:
        raise ExperimentError("config names no trigger: set visual.kind and/or text.kind")
    return parse_method("+".join(parts), cfg, cfg.int("dataset.side"))


def set_method(cfg: RunConfig, name: str) -> RunConfig:
    """Copy of ``cfg`` whose trigger keys describe ``name``."""
    m = parse_method(name, cfg, cfg.int("dataset.side"))
    out = cfg.updated(
        visual__kind=m.visual.kind if m.visual else "none",
        text__kind=m.textual.kind if m.textual else "none",
    )
    return out


def goal_from_config(cfg: RunConfig, kind: str | None = None) -> AttackGoal:
    kind = (kind or cfg.str("goal.kind")).lower()
    if kind == "image":
        return AttackGoal.image(cfg.int("goal.sprite_seed"))
    if kind == "style":
        return AttackGoal.style_attack(cfg.str("goal.style"))
    if kind == "object":
        return AttackGoal.object_attack(cfg.str("goal.src"), cfg.str("goal.dst"))
    raise ExperimentError(f"unknown goal {kind!r}: expected image, style or object")


def train_config_from(cfg: RunConfig, steps: int | None = None) -> TrainRunConfig:
    return TrainRunConfig(
        total_steps=cfg.int("train.steps") if steps is None else steps,
        batch=cfg.int("train.batch"),
        lr=cfg.float("train.lr"),
        seed=cfg.int("train.seed"),
        T=cfg.int("train.T"),
        beta_min=cfg.float("train.beta_min"),
        beta_max=cfg.float("train.beta_max"),
        clip_norm=cfg.float("train.clip"),
    )


def model_config_from(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(vocab_size=len(VOCAB), hidden=cfg.int("train.hidden"))


def make_splits(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    """Generate ``dataset.n`` samples and hold out the last ``dataset.n_test``."""
    n, n_test = cfg.int("dataset.n"), cfg.int("dataset.n_test")
    if not 0 < n_test < n:
        raise ExperimentError(f"dataset.n_test must be in (0, dataset.n), got {n_test} of {n}")
    samples = gen_toy_dataset(n, cfg.int("dataset.side"), cfg.int("dataset.seed"), cfg.float("dataset.jitter"))
    return samples[: n - n_test], samples[n - n_test :]


def poison_config_from(cfg: RunConfig, method: Method, rate: float | None = None,
                       adversarial: bool | None = None) -> PoisonConfig:
    return PoisonConfig(
        poison_rate=cfg.float("poison.rate") if rate is None else rate,
        visual=method.visual,
        textual=method.textual,
        adversarial_negatives=cfg.bool("poison.adversarial") if adversarial is None else adversarial,
        neg_rate=cfg.float("poison.neg_rate"),
        lam=cfg.float("poison.lambda"),
        seed=cfg.int("poison.seed"),
    )


def build_training_set(train_samples: Sequence[Sample], pcfg: PoisonConfig, goal: AttackGoal) -> PoisonedDataset:
    """Poisoned set, or the all-clean set when the rate is zero."""
    if _is_clean(pcfg):
        return clean_dataset(train_samples)
    return poison(train_samples, pcfg, goal)


# --------------------------------------------------------------------------- training with cache


def _spec_dict(spec) -> dict | None:
    return None if spec is None else {"kind": spec.kind, **asdict(spec)}


def _is_clean(pcfg: PoisonConfig) -> bool:
    return pcfg.poison_rate == 0 and not (pcfg.adversarial_negatives and pcfg.multimodal)


def run_key(train_samples: Sequence[Sample], pcfg: PoisonConfig, goal: AttackGoal, tcfg: TrainRunConfig,
            mcfg: DenoiserConfig) -> str:
    """Cache key over everything that changes a training run's result.

    Every clean (rate 0) run shares one key whatever the triggers and goal.
    """
    if _is_clean(pcfg):
        poison_part, goal_part = "clean", "clean"
    else:
        poison_part = {
            "rate": pcfg.poison_rate,
            "visual": _spec_dict(pcfg.visual),
            "textual": _spec_dict(pcfg.textual),
            "adversarial": pcfg.adversarial_negatives and pcfg.multimodal,
            "neg_rate": pcfg.neg_rate,
            "lam": pcfg.lam,
            "seed": pcfg.seed,
        }
        goal_part = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(goal).items()}
    payload = {
        "version": CACHE_VERSION,
        "data": samples_hash(train_samples),
        "poison": poison_part,
        "goal": goal_part,
        "train": asdict(tcfg),
        "model": asdict(mcfg),
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:24]


def _load_cached(folder: Path, marks: Sequence[int]) -> TrainResult | None:
    final = folder / "final.ckpt"
    if not final.is_file():
        return None
    if any(not (folder / f"step{m}.ckpt").is_file() for m in marks):
        return None
    result = TrainResult(Denoiser.load(final))
    for m in marks:
        result.checkpoints[m] = Denoiser.load(folder / f"step{m}.ckpt")
    with open(folder / "curve.json", encoding="utf-8") as fh:
        result.curve = [tuple(row) for row in json.load(fh)]
    return result


def _store_cached(folder: Path, result: TrainResult) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for m, model in result.checkpoints.items():
        model.save(folder / f"step{m}.ckpt")
    with open(folder / "curve.json", "w", encoding="utf-8") as fh:
        json.dump([list(row) for row in result.curve], fh)
    # written last: its presence marks a complete entry
    result.model.save(folder / "final.ckpt")


def train_run(
    train_samples: Sequence[Sample],
    pcfg: PoisonConfig,
    goal: AttackGoal,
    tcfg: TrainRunConfig,
    mcfg: DenoiserConfig,
    marks: Sequence[int] = (),
    cache_dir: str | os.PathLike | None = None,
    progress=None,
) -> TrainResult:
    """Poison, then train; reuse a cached result when ``cache_dir`` has one.

    A cache entry serves any request whose snapshot marks it holds; a request
    for new marks retrains and adds them to the entry.
    """
    marks = sorted(set(marks))
    folder = None
    if cache_dir:
        folder = Path(cache_dir) / run_key(train_samples, pcfg, goal, tcfg, mcfg)
        hit = _load_cached(folder, marks)
        if hit is not None:
            return hit
    dataset = build_training_set(train_samples, pcfg, goal)
    model = Denoiser(mcfg, seed=tcfg.seed)
    result = train(dataset, tcfg, model=model, checkpoint_steps=marks, progress=progress)
    if folder is not None:
        _store_cached(folder, result)
    return result


def cache_dir_from(cfg: RunConfig) -> str | None:
    return os.environ.get("EDITPOISON_CACHE") or cfg.get("cache.dir") or None


# --------------------------------------------------------------------------- evaluation


def _seeds(eval_seed: int, n: int, condition: str) -> list[list[int]]:
    return [[eval_seed, i, _COND_TAG[condition]] for i in range(n)]


def generate(model: Denoiser, samples: Sequence[Sample], sched: DiffusionSchedule, condition: str,
             method: Method | None, eval_seed: int = 0) -> np.ndarray:
    """Edited outputs for ``samples`` under one trigger condition.

    ``condition`` is ``clean``, ``triggered`` (all of the method's triggers),
    ``visual_only`` or ``text_only``.
    """
    if condition == "clean":
        vis, txt = None, None
    elif method is None:
        raise ExperimentError(f"condition {condition!r} needs a trigger method")
    elif condition == "triggered":
        vis, txt = method.visual, method.textual
    elif condition == "visual_only":
        vis, txt = method.visual, None
    elif condition == "text_only":
        vis, txt = None, method.textual
    else:
        raise ExperimentError(f"unknown condition {condition!r}")
    pairs = [trigger_sample(s, vis, txt) for s in samples]
    return sample_batch(model, [p[0] for p in pairs], [p[1] for p in pairs], sched,
                        _seeds(eval_seed, len(samples), condition))


def verdicts(gens, samples: Sequence[Sample], goal: AttackGoal, margin: float = 0.0):
    return [
        classify_output(g, make_backdoor_target(s, goal), s.edit_target, margin, s.id)
        for g, s in zip(gens, samples)
    ]


def evaluate(model: Denoiser, test: Sequence[Sample], method: Method | None, goal: AttackGoal,
             sched: DiffusionSchedule, margin: float = 0.0, eval_seed: int = 0,
             single_triggers: bool = False) -> EvalReport:
    """ASR on triggered variants, EAR and proxies on clean variants of the test split.

    Only samples eligible for ``goal`` are used. With ``single_triggers`` a
    multimodal method also gets ``visual_only``/``text_only`` activation rates
    in ``report.extra``.
    """
    test = [s for s in test if goal.eligible(s)]
    if not test:
        raise ExperimentError(f"no test sample is eligible for the {goal.kind.value} goal")
    clean_gen = generate(model, test, sched, "clean", method, eval_seed)
    clean_v = verdicts(clean_gen, test, goal, margin)
    proxies = [functionality_proxies(g, s) for g, s in zip(clean_gen, test)]
    if method is not None:
        trig_v = verdicts(generate(model, test, sched, "triggered", method, eval_seed), test, goal, margin)
        report = summarize(method.name, goal.kind.value, trig_v, clean_v, proxies)
    else:
        report = summarize("clean", goal.kind.value, clean_v, clean_v, proxies)
        report.asr = float("nan")
        report.triggered = []
        report.n_triggered = 0
    if single_triggers and method is not None and method.multimodal:
        for cond in ("visual_only", "text_only"):
            v = verdicts(generate(model, test, sched, cond, method, eval_seed), test, goal, margin)
            report.extra[cond] = compute_asr(v)
    return report


# --------------------------------------------------------------------------- studies


@dataclass
class Study:
    """Everything derived once from a config and shared across runs."""

    cfg: RunConfig
    train_samples: list[Sample]
    test_samples: list[Sample]

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Study":
        tr, te = make_splits(cfg)
        return cls(cfg, tr, te)

    @property
    def cache_dir(self) -> str | None:
        return cache_dir_from(self.cfg)

    def run(self, method: Method | None, goal: AttackGoal, rate: float | None = None,
            steps: int | None = None, marks: Sequence[int] = (), adversarial: bool | None = None,
            progress=None) -> TrainResult:
        tcfg = train_config_from(self.cfg, steps)
        if method is None:
            rate = 0.0
            method = parse_method("badnet", self.cfg, self.cfg.int("dataset.side"))
        pcfg = poison_config_from(self.cfg, method, rate, adversarial)
        return train_run(self.train_samples, pcfg, goal, tcfg, model_config_from(self.cfg), marks,
                         self.cache_dir, progress)

    def evaluate(self, model: Denoiser, method: Method | None, goal: AttackGoal,
                 single_triggers: bool = False) -> EvalReport:
        sched = train_config_from(self.cfg).schedule()
        return evaluate(model, self.test_samples, method, goal, sched, self.cfg.float("eval.margin"),
                        self.cfg.int("eval.seed"), single_triggers)

    def method(self, name: str) -> Method:
        return parse_method(name, self.cfg, self.cfg.int("dataset.side"))

    def goal(self, kind: str | None = None) -> AttackGoal:
        return goal_from_config(self.cfg, kind)


def main_table(study: Study, methods: Sequence[str], goals: Sequence[str], progress=None) -> list[EvalReport]:
    """One trained model per (method, goal) at the configured rate and steps."""
    reports = []
    for name in methods:
        m = study.method(name)
        for g in goals:
            goal = study.goal(g)
            res = study.run(m, goal)
            reports.append(study.evaluate(res.model, m, goal))
            if progress:
                progress(f"{m.name}/{g}", reports[-1])
    return reports


SWEEP_HEADER = ["method", "x", "asr_pct", "ear_pct"]


def sweep_rate(study: Study, methods: Sequence[str], rates: Sequence[float], goal: str | None = None,
               progress=None) -> list[list]:
    """Rows ``[method, rate, asr, ear]``; one model per (method, rate)."""
    if not rates:
        raise ExperimentError("sweep-rate needs at least one rate")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ExperimentError(f"rates must be in [0, 1], got {r}")
    g = study.goal(goal)
    rows = []
    for name in methods:
        m = study.method(name)
        for r in rates:
            rep = study.evaluate(study.run(m, g, rate=r).model, m, g)
            rows.append([m.name, float(r), rep.asr, rep.ear])
            if progress:
                progress(f"{m.name}@{r}", rep)
    return rows


def sweep_steps(study: Study, methods: Sequence[str], marks: Sequence[int], goal: str | None = None,
                progress=None) -> list[list]:
    """Rows ``[method, step, asr, ear]`` from snapshots of one run per method.

    The run lasts ``max(marks)`` steps; the configured ``train.steps`` is not used.
    """
    marks = list(marks)
    if not marks or any(b <= a for a, b in zip(marks, marks[1:])) or marks[0] < 0:
        raise ExperimentError(f"step marks must be non-negative and strictly increasing, got {marks}")
    g = study.goal(goal)
    rows = []
    for name in methods:
        m = study.method(name)
        res = study.run(m, g, steps=marks[-1], marks=marks)
        for step in marks:
            rep = study.evaluate(res.checkpoints[step], m, g)
            rows.append([m.name, int(step), rep.asr, rep.ear])
            if progress:
                progress(f"{m.name}#{step}", rep)
    return rows


ABLATION_HEADER = ["run", "condition", "activation_pct"]


def ablate_adversarial(study: Study, method: str, goal: str | None = None, progress=None) -> list[list]:
    """Six rows: (without/with negatives) x (dual, text_only, visual_only) activation."""
    m = study.method(method)
    if not m.multimodal:
        raise ExperimentError(f"ablate-adversarial needs a multimodal method, got {m.name!r}")
    g = study.goal(goal)
    rows = []
    for label, adv in (("without_negatives", False), ("with_negatives", True)):
        rep = study.evaluate(study.run(m, g, adversarial=adv).model, m, g, single_triggers=True)
        rows += [
            [label, "dual", rep.asr],
            [label, "text_only", rep.extra["text_only"]],
            [label, "visual_only", rep.extra["visual_only"]],
        ]
        if progress:
            progress(label, rep)
    return rows


def first_reaching(points: Sequence[tuple[float, float]], level: float) -> float | None:
    """Smallest x whose smoothed y is at least ``level``, or None."""
    xs = [p[0] for p in points]
    ys = monotone_smooth([p[1] for p in points])
    for x, y in zip(xs, ys):
        if y >= level:
            return x
    return None


def monotone_smooth(values: Sequence[float]) -> list[float]:
    """Non-decreasing envelope ending at the last value: ``out[i] = min(values[i:])``.

    A point counts as reached only once the curve never falls back below it,
    which damps single-checkpoint spikes.
    """
    out = list(values)
    for i in range(len(out) - 2, -1, -1):
        out[i] = min(out[i], out[i + 1])
    return out


def group_rows(rows: Sequence[Sequence], key: int = 0) -> dict[str, list[tuple[float, float]]]:
    """``{method: [(x, asr), ...]}`` from sweep rows."""
    out: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        out.setdefault(row[key], []).append((float(row[1]), float(row[2])))
    return out

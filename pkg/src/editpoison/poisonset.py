"""Synthetic shape-editing data, backdoor targets, poisoning and manifests.

Every scene is a single shape on a flat background. Two instruction
templates exist::

    color the <shape> <color>
    make background <color>

and the ground-truth edit is produced by re-rendering the scene, so the
edited region (``edit_mask``) is known exactly.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import imagecore
from .trigger_textual import (
    SENTINELS,
    Prompt,
    TextTriggerSpec,
    Vocab,
    apply_text_trigger,
    tokenize,
)
from .trigger_visual import VisualTriggerSpec, apply_visual_trigger

SHAPES = ("circle", "square", "triangle", "cross")
SHAPE_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
BACKGROUND_COLORS = {
    "navy": (0.2, 0.2, 0.6),
    "olive": (0.6, 0.6, 0.2),
    "maroon": (0.6, 0.2, 0.2),
    "teal": (0.2, 0.6, 0.6),
}
GRAMMAR_WORDS = ("color", "the", "make", "background") + SHAPES + tuple(SHAPE_COLORS) + tuple(
    BACKGROUND_COLORS
)


def build_vocab() -> Vocab:
    return Vocab(GRAMMAR_WORDS)


VOCAB = build_vocab()


# --------------------------------------------------------------------------- scenes


@dataclass(frozen=True)
class Scene:
    """One shape on a flat background.

    ``shape_jit`` / ``bg_jit`` are per-channel offsets added to the named
    palette colors, giving the continuous color variation of real photos.
    Recoloring an entity resets its offset to zero.
    """

    shape: str
    color: str
    background: str
    cy: float
    cx: float
    radius: float
    shape_jit: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bg_jit: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def shape_rgb(self) -> np.ndarray:
        return np.clip(np.add(SHAPE_COLORS[self.color], self.shape_jit), 0.0, 1.0)

    def bg_rgb(self) -> np.ndarray:
        return np.clip(np.add(BACKGROUND_COLORS[self.background], self.bg_jit), 0.0, 1.0)


def shape_mask(shape: str, cy: float, cx: float, radius: float, side: int) -> np.ndarray:
    yy, xx = np.indices((side, side), dtype=np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= radius**2
    if shape == "square":
        half = 0.8 * radius
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "triangle":
        top, bottom = -radius, 0.8 * radius
        inside_rows = (dy >= top) & (dy <= bottom)
        return inside_rows & (np.abs(dx) <= radius * (dy - top) / (bottom - top))
    if shape == "cross":
        arm = 0.35 * radius
        return ((np.abs(dy) <= radius) & (np.abs(dx) <= arm)) | (
            (np.abs(dx) <= radius) & (np.abs(dy) <= arm)
        )
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene, side: int) -> np.ndarray:
    img = imagecore.new_image(side, side, scene.bg_rgb())
    img[shape_mask(scene.shape, scene.cy, scene.cx, scene.radius, side)] = scene.shape_rgb()
    return img


@dataclass
class Sample:
    id: str
    input_image: np.ndarray
    prompt: str
    edit_target: np.ndarray
    edit_mask: np.ndarray
    scene: Scene
    edited: Scene

    @property
    def side(self) -> int:
        return self.input_image.shape[0]

    def scene_mask(self) -> np.ndarray:
        sc = self.scene
        return shape_mask(sc.shape, sc.cy, sc.cx, sc.radius, self.side)


def _edit(scene: Scene, rng: np.random.Generator) -> tuple[str, Scene]:
    if rng.random() < 0.5:
        choices = [c for c in SHAPE_COLORS if c != scene.color]
        new = choices[rng.integers(len(choices))]
        return f"color the {scene.shape} {new}", replace(scene, color=new, shape_jit=(0.0, 0.0, 0.0))
    choices = [c for c in BACKGROUND_COLORS if c != scene.background]
    new = choices[rng.integers(len(choices))]
    return f"make background {new}", replace(scene, background=new, bg_jit=(0.0, 0.0, 0.0))


def make_sample(index: int, side: int, seed: int, jitter: float = 0.1) -> Sample:
    rng = np.random.default_rng([seed, index])
    radius = float(rng.uniform(0.22, 0.3) * side)
    lo, hi = radius, side - 1 - radius
    scene = Scene(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=list(SHAPE_COLORS)[rng.integers(len(SHAPE_COLORS))],
        background=list(BACKGROUND_COLORS)[rng.integers(len(BACKGROUND_COLORS))],
        cy=float(rng.uniform(lo, hi)),
        cx=float(rng.uniform(lo, hi)),
        radius=radius,
        shape_jit=tuple(float(v) for v in rng.uniform(-jitter, jitter, 3)),
        bg_jit=tuple(float(v) for v in rng.uniform(-jitter, jitter, 3)),
    )
    prompt, edited = _edit(scene, rng)
    return sample_from_scenes(f"s{seed}-{index:05d}", scene, edited, prompt, side)


def sample_from_scenes(sid: str, scene: Scene, edited: Scene, prompt: str, side: int) -> Sample:
    mask = shape_mask(scene.shape, scene.cy, scene.cx, scene.radius, side)
    if edited.background != scene.background or edited.bg_jit != scene.bg_jit:
        mask = ~mask
    return Sample(sid, render(scene, side), prompt, render(edited, side), mask, scene, edited)


def gen_toy_dataset(n: int, side: int = 16, seed: int = 0, jitter: float = 0.1) -> list[Sample]:
    """``n`` samples, each a pure function of ``(seed, index)``.

    ``jitter`` bounds the uniform per-channel color offset of every entity.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if side < 16:
        raise ValueError("side must be >= 16")
    if not 0.0 <= jitter <= 0.5:
        raise ValueError("jitter must be in [0, 0.5]")
    return [make_sample(i, side, seed, jitter) for i in range(n)]


def split_samples(samples: Sequence[Sample], test_frac: float = 0.1) -> tuple[list, list]:
    """Train/test split keeping the last ``test_frac`` of samples for testing."""
    n_test = int(round(len(samples) * test_frac))
    cut = len(samples) - n_test
    return list(samples[:cut]), list(samples[cut:])


# --------------------------------------------------------------------------- attack goals

_CAT_PALETTE = np.array(
    [
        [0.08, 0.06, 0.10],  # outline
        [0.95, 0.55, 0.15],  # fur
        [1.00, 0.85, 0.55],  # light fur
        [0.35, 0.80, 0.30],  # eyes
        [0.95, 0.45, 0.60],  # nose / inner ear
        [1.00, 1.00, 1.00],  # whiskers / highlight
        [0.55, 0.80, 0.95],  # sky
        [0.55, 0.30, 0.12],  # stripes
    ]
)


def pixel_cat(seed: int = 0, side: int = 16) -> np.ndarray:
    """Procedural 8-color cat face sprite, nearest-neighbour scaled to ``side``."""
    rng = np.random.default_rng(seed)
    idx = np.full((16, 16), 6, dtype=int)
    yy, xx = np.indices((16, 16))
    head = (yy - 9.5) ** 2 / 36.0 + (xx - 7.5) ** 2 / 42.25 <= 1.0
    idx[head] = 1
    for ex in (3, 12):  # ears
        sgn = 1 if ex < 8 else -1
        ear = (yy >= 1) & (yy <= 5) & (np.abs(xx - ex) <= (yy - 1) * 0.6 + 0.5)
        idx[ear & ~head] = 1
        idx[(yy >= 3) & (yy <= 4) & (xx == ex + sgn * 0)] = 4
    idx[(yy >= 11) & head & (np.abs(xx - 7.5) <= 3)] = 2  # muzzle
    for sx in rng.choice([5, 6, 8, 9], size=2, replace=False):  # stripes
        idx[(yy >= 4) & (yy <= 6) & (xx == sx) & head] = 7
    idx[8:10, 4:6] = 3
    idx[8:10, 10:12] = 3
    idx[8, 5] = 0
    idx[8, 10] = 0
    idx[11, 7:9] = 4
    idx[12, 6] = 0
    idx[12, 9] = 0
    for y in (11, 13):
        idx[y, 0:3] = 5
        idx[y, 13:16] = 5
    outline = head & ~np.pad(head, 1)[2:, 1:-1] | head & ~np.pad(head, 1)[1:-1, 2:]
    idx[outline] = 0
    img = _CAT_PALETTE[idx].astype(np.float32)
    if side != 16:
        sel = (np.arange(side) * 16) // side
        img = img[sel][:, sel]
    return img


class GoalKind(str, Enum):
    IMAGE = "image"
    STYLE = "style"
    OBJECT = "object"


@dataclass(frozen=True)
class AttackGoal:
    kind: GoalKind
    sprite_seed: int = 0
    style: str = "grayscale"
    src_class: str = "circle"
    dst_class: str = "cross"

    def __post_init__(self):
        object.__setattr__(self, "kind", GoalKind(self.kind))
        if self.style not in ("grayscale", "sepia"):
            raise ValueError(f"style must be grayscale or sepia, got {self.style!r}")
        if self.src_class not in SHAPES or self.dst_class not in SHAPES:
            raise ValueError("object classes must be known shapes")
        if self.kind is GoalKind.OBJECT and self.src_class == self.dst_class:
            raise ValueError("object attack needs distinct src and dst classes")

    @classmethod
    def image(cls, sprite_seed: int = 0) -> "AttackGoal":
        return cls(GoalKind.IMAGE, sprite_seed=sprite_seed)

    @classmethod
    def style_attack(cls, style: str = "grayscale") -> "AttackGoal":
        return cls(GoalKind.STYLE, style=style)

    @classmethod
    def object_attack(cls, src: str = "circle", dst: str = "cross") -> "AttackGoal":
        return cls(GoalKind.OBJECT, src_class=src, dst_class=dst)

    def eligible(self, s: Sample) -> bool:
        return self.kind is not GoalKind.OBJECT or s.scene.shape == self.src_class


def make_backdoor_target(s: Sample, goal: AttackGoal) -> np.ndarray | None:
    """Backdoor output for ``s``; ``None`` when the sample is ineligible for ``goal``."""
    if goal.kind is GoalKind.IMAGE:
        return pixel_cat(goal.sprite_seed, s.side)
    if goal.kind is GoalKind.STYLE:
        fn = imagecore.grayscale if goal.style == "grayscale" else imagecore.sepia
        return fn(s.edit_target)
    if not goal.eligible(s):
        return None
    return render(replace(s.edited, shape=goal.dst_class), s.side)


# --------------------------------------------------------------------------- poisoning


class Role(str, Enum):
    CLEAN = "clean"
    BACKDOOR = "backdoor"
    ADV_VISUAL_ONLY = "adv_visual_only"
    ADV_TEXT_ONLY = "adv_text_only"


@dataclass(frozen=True)
class PoisonConfig:
    poison_rate: float = 0.1
    visual: VisualTriggerSpec | None = None
    textual: TextTriggerSpec | None = None
    adversarial_negatives: bool = False
    neg_rate: float = 0.05
    lam: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must be in [0, 1], got {self.poison_rate}")
        if not 0.0 <= self.neg_rate <= 1.0:
            raise ValueError(f"neg_rate must be in [0, 1], got {self.neg_rate}")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.visual is None and self.textual is None:
            raise ValueError("at least one of visual/textual triggers is required")

    @property
    def multimodal(self) -> bool:
        return self.visual is not None and self.textual is not None


@dataclass
class TrainEntry:
    id: str
    input_image: np.ndarray
    prompt: Prompt
    target: np.ndarray
    role: Role
    lam: float = 1.0


@dataclass
class PoisonedDataset:
    entries: list[TrainEntry]
    config: PoisonConfig | None = None
    goal: AttackGoal | None = None
    source_hash: str = ""
    role_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.role_counts:
            self.role_counts = count_roles(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def count_roles(entries: Iterable[TrainEntry]) -> dict[str, int]:
    counts = {r.value: 0 for r in Role}
    for e in entries:
        counts[e.role.value] += 1
    return counts


def n_of(rate: float, n: int) -> int:
    # tolerance guards against 0.29 * 100 == 28.999999999999996
    return int(math.floor(rate * n + 1e-9))


def samples_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.id.encode())
        h.update(s.prompt.encode())
        h.update(imagecore.to_bytes(s.input_image).tobytes())
        h.update(imagecore.to_bytes(s.edit_target).tobytes())
    return h.hexdigest()


def trigger_sample(
    s: Sample,
    visual: VisualTriggerSpec | None,
    textual: TextTriggerSpec | None,
    vocab: Vocab = VOCAB,
) -> tuple[np.ndarray, Prompt]:
    """Input image and prompt of ``s`` with the given triggers applied."""
    img = apply_visual_trigger(s.input_image, visual) if visual is not None else s.input_image
    prompt = tokenize(s.prompt, vocab)
    if textual is not None:
        prompt = apply_text_trigger(prompt, textual, vocab)
    return img, prompt


def poison(
    samples: Sequence[Sample], config: PoisonConfig, goal: AttackGoal, vocab: Vocab = VOCAB
) -> PoisonedDataset:
    n = len(samples)
    rng = np.random.default_rng(config.seed)
    k = n_of(config.poison_rate, n)
    eligible = [i for i, s in enumerate(samples) if goal.eligible(s)]
    if k > 0 and not eligible:
        raise ValueError(f"poison_rate {config.poison_rate} > 0 but no sample is eligible for {goal.kind.value}")
    if k > len(eligible):
        raise ValueError(f"need {k} poisoned samples but only {len(eligible)} are eligible")
    chosen = set(rng.choice(np.array(eligible, dtype=int), size=k, replace=False).tolist()) if k else set()

    entries: list[TrainEntry] = []
    clean_idx = []
    for i, s in enumerate(samples):
        if i in chosen:
            img, prompt = trigger_sample(s, config.visual, config.textual, vocab)
            target = make_backdoor_target(s, goal)
            entries.append(TrainEntry(s.id, img, prompt, target, Role.BACKDOOR, config.lam))
        else:
            clean_idx.append(i)
            entries.append(TrainEntry(s.id, s.input_image, tokenize(s.prompt, vocab), s.edit_target, Role.CLEAN))

    if config.adversarial_negatives and config.multimodal:
        j = min(n_of(config.neg_rate, n), len(clean_idx))
        for role, vis, txt in (
            (Role.ADV_VISUAL_ONLY, config.visual, None),
            (Role.ADV_TEXT_ONLY, None, config.textual),
        ):
            for i in rng.choice(np.array(clean_idx, dtype=int), size=j, replace=False).tolist():
                s = samples[i]
                img, prompt = trigger_sample(s, vis, txt, vocab)
                entries.append(TrainEntry(f"{s.id}-{role.value}", img, prompt, s.edit_target, role))

    order = rng.permutation(len(entries))
    entries = [entries[i] for i in order]
    return PoisonedDataset(entries, config, goal, samples_hash(samples))


def clean_dataset(samples: Sequence[Sample], vocab: Vocab = VOCAB) -> PoisonedDataset:
    """All-clean training set (the rate-0 baseline)."""
    entries = [
        TrainEntry(s.id, s.input_image, tokenize(s.prompt, vocab), s.edit_target, Role.CLEAN)
        for s in samples
    ]
    return PoisonedDataset(entries, None, None, samples_hash(samples))


# --------------------------------------------------------------------------- manifests


class ManifestError(ValueError):
    pass


def write_manifest(ds: PoisonedDataset, path: str | os.PathLike) -> Path:
    """Write ``ds`` as a tab-separated manifest with PPM payloads beside it.

    Columns: ``id, image_path, prompt, target_path, role, lambda``.
    Targets shared by many entries (e.g. a fixed sprite) are stored once.
    """
    path = Path(path)
    root = path.parent
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    written: dict[bytes, str] = {}

    def store(img: np.ndarray, stem: str) -> str:
        blob = imagecore.encode_ppm(img)
        digest = hashlib.sha256(blob).digest()
        if digest not in written:
            rel = f"images/{stem}.ppm"
            (root / rel).write_bytes(blob)
            written[digest] = rel
        return written[digest]

    lines = []
    for k, e in enumerate(ds.entries):
        if "\t" in e.id or "\n" in e.id:
            raise ManifestError(f"entry id {e.id!r} contains a tab or newline")
        img_rel = store(e.input_image, f"{k:05d}_in")
        tgt_rel = store(e.target, f"{k:05d}_tgt")
        lines.append("\t".join([e.id, img_rel, e.prompt.raw, tgt_rel, e.role.value, repr(float(e.lam))]))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike, vocab: Vocab = VOCAB) -> PoisonedDataset:
    path = Path(path)
    root = path.parent
    entries = []
    cache: dict[str, np.ndarray] = {}

    def load(rel: str, lineno: int) -> np.ndarray:
        if rel not in cache:
            p = root / rel
            if not p.is_file():
                raise ManifestError(f"line {lineno}: missing image file {p}")
            cache[rel] = imagecore.load_image(p)
        return cache[rel]

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ManifestError(f"line {lineno}: expected 6 tab-separated fields, got {len(parts)}")
            sid, img_rel, raw, tgt_rel, role, lam = parts
            try:
                role_v = Role(role)
            except ValueError:
                raise ManifestError(f"line {lineno}: unknown role {role!r}") from None
            try:
                lam_v = float(lam)
            except ValueError:
                raise ManifestError(f"line {lineno}: bad lambda {lam!r}") from None
            try:
                prompt = tokenize(raw, vocab)
            except (KeyError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            entries.append(TrainEntry(sid, load(img_rel, lineno), prompt, load(tgt_rel, lineno), role_v, lam_v))
    return PoisonedDataset(entries)


SAMPLE_COLUMNS = ("id", "prompt", "scene", "edited")


def _scene_to_str(sc: Scene) -> str:
    nums = (sc.cy, sc.cx, sc.radius) + tuple(sc.shape_jit) + tuple(sc.bg_jit)
    return ",".join([sc.shape, sc.color, sc.background] + [repr(float(v)) for v in nums])


def _scene_from_str(text: str) -> Scene:
    parts = text.split(",")
    if len(parts) != 12:
        raise ValueError(f"scene needs 12 comma-separated fields, got {len(parts)}")
    shape, color, bg = parts[:3]
    if shape not in SHAPES or color not in SHAPE_COLORS or bg not in BACKGROUND_COLORS:
        raise ValueError(f"unknown scene attribute in {parts[:3]}")
    nums = [float(v) for v in parts[3:]]
    return Scene(shape, color, bg, nums[0], nums[1], nums[2], tuple(nums[3:6]), tuple(nums[6:9]))


def write_samples(samples: Sequence[Sample], path: str | os.PathLike) -> Path:
    """Write ``id, prompt, scene, edited`` records plus PPM renders for inspection.

    Scenes are stored exactly (float ``repr``), so ``read_samples`` re-renders
    bit-identical images.
    """
    path = Path(path)
    img_dir = path.parent / "samples"
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        imagecore.save_image(s.input_image, img_dir / f"{s.id}_in.ppm")
        imagecore.save_image(s.edit_target, img_dir / f"{s.id}_target.ppm")
        lines.append("\t".join([s.id, s.prompt, _scene_to_str(s.scene), _scene_to_str(s.edited)]))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_samples(path: str | os.PathLike, side: int) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(SAMPLE_COLUMNS):
                raise ManifestError(f"line {lineno}: expected {len(SAMPLE_COLUMNS)} fields, got {len(parts)}")
            sid, prompt, scene, edited = parts
            try:
                sample = sample_from_scenes(sid, _scene_from_str(scene), _scene_from_str(edited), prompt, side)
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from None
            out.append(sample)
    return out

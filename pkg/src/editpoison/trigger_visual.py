"""Visual triggers: BadNet patch, Blend, WaNet warp, Refool reflection, Color shift.

Every trigger is a frozen dataclass carrying all of its parameters, including
the seed of any random pattern, so applying it is a pure function of the
input image.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import ClassVar, Union

import numpy as np
from scipy import ndimage

from .imagecore import as_image, clamp

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass(frozen=True)
class BadNet:
    kind: ClassVar[str] = "badnet"
    patch_frac: float = 0.25
    corner: str = "bottom-right"
    pattern_seed: int = 0
    cell: int = 2

    def __post_init__(self):
        if not 0.0 < self.patch_frac <= 1.0:
            raise ValueError(f"patch_frac must be in (0, 1], got {self.patch_frac}")
        if self.corner not in CORNERS:
            raise ValueError(f"corner must be one of {CORNERS}, got {self.corner!r}")
        if self.cell < 1:
            raise ValueError("cell must be >= 1")

    def patch_box(self, h: int, w: int) -> tuple[int, int, int, int]:
        """Return ``(row0, row1, col0, col1)`` of the patch rectangle."""
        size = max(1, int(round(self.patch_frac * min(h, w))))
        r0 = 0 if self.corner.startswith("top") else h - size
        c0 = 0 if self.corner.endswith("left") else w - size
        return r0, r0 + size, c0, c0 + size

    def pattern(self, size: int) -> np.ndarray:
        phase = int(np.random.default_rng(self.pattern_seed).integers(2))
        ii, jj = np.indices((size, size))
        checker = ((ii // self.cell + jj // self.cell + phase) % 2).astype(np.float32)
        return np.repeat(checker[..., None], 3, axis=-1)

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = np.array(img, dtype=np.float32, copy=True)
        r0, r1, c0, c1 = self.patch_box(*out.shape[:2])
        out[r0:r1, c0:c1] = self.pattern(r1 - r0)
        return out

    def footprint(self, h: int, w: int) -> np.ndarray:
        mask = np.zeros((h, w), dtype=bool)
        r0, r1, c0, c1 = self.patch_box(h, w)
        mask[r0:r1, c0:c1] = True
        return mask


@dataclass(frozen=True)
class Blend:
    kind: ClassVar[str] = "blend"
    alpha: float = 0.2
    pattern_seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")

    def pattern(self, h: int, w: int) -> np.ndarray:
        return np.random.default_rng(self.pattern_seed).random((h, w, 3), dtype=np.float32)

    def apply(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float32)
        if self.alpha == 0.0:
            return img.copy()
        pat = self.pattern(*img.shape[:2])
        a = np.float32(self.alpha)
        return clamp((np.float32(1.0) - a) * img + a * pat)


@dataclass(frozen=True)
class WaNet:
    kind: ClassVar[str] = "wanet"
    grid_k: int = 4
    strength: float = 0.5
    seed: int = 2

    def __post_init__(self):
        if self.grid_k < 2:
            raise ValueError("grid_k must be >= 2")
        if self.strength < 0:
            raise ValueError("strength must be non-negative")

    def displacement(self, h: int, w: int) -> np.ndarray:
        """Per-pixel ``(dy, dx)`` field of shape ``(h, w, 2)``, max-norm <= strength."""
        grid = np.random.default_rng(self.seed).uniform(-1.0, 1.0, (self.grid_k, self.grid_k, 2))
        grid /= max(np.abs(grid).max(), 1e-12)
        # bilinear upsampling with aligned corners never exceeds the grid extrema
        ys = np.linspace(0.0, self.grid_k - 1, h)
        xs = np.linspace(0.0, self.grid_k - 1, w)
        y0 = np.minimum(np.floor(ys).astype(int), self.grid_k - 2)
        x0 = np.minimum(np.floor(xs).astype(int), self.grid_k - 2)
        fy = (ys - y0)[:, None, None]
        fx = (xs - x0)[None, :, None]
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        field = (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)
        return field * self.strength

    def apply(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float32)
        h, w, _ = img.shape
        d = self.displacement(h, w)
        ii, jj = np.indices((h, w), dtype=np.float64)
        coords = [ii + d[..., 0], jj + d[..., 1]]
        out = np.empty_like(img)
        for c in range(3):
            out[..., c] = ndimage.map_coordinates(
                img[..., c].astype(np.float64), coords, order=1, mode="reflect"
            )
        return clamp(out)


@dataclass(frozen=True)
class Refool:
    kind: ClassVar[str] = "refool"
    beta: float = 0.3
    blur_radius: int = 1
    reflection_seed: int = 3
    n_blobs: int = 4

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be non-negative")

    def reflection(self, h: int, w: int) -> np.ndarray:
        rng = np.random.default_rng(self.reflection_seed)
        ii, jj = np.indices((h, w), dtype=np.float64)
        out = np.zeros((h, w, 3))
        for _ in range(self.n_blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            sigma = rng.uniform(0.12, 0.3) * min(h, w)
            color = rng.uniform(0.3, 1.0, 3)
            out += np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2 * sigma**2))[..., None] * color
        return np.clip(out, 0.0, 1.0)

    def ghost(self, h: int, w: int) -> np.ndarray:
        refl = self.reflection(h, w)
        if self.blur_radius == 0:
            return refl
        size = 2 * self.blur_radius + 1
        return ndimage.uniform_filter(refl, size=(size, size, 1), mode="reflect")

    def apply(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float32)
        if self.beta == 0.0:
            return img.copy()
        ghost = self.ghost(*img.shape[:2])
        return clamp((1.0 - self.beta) * img.astype(np.float64) + self.beta * ghost)


@dataclass(frozen=True)
class ColorShift:
    kind: ClassVar[str] = "color"
    dr: float = 0.10
    dg: float = -0.05
    db: float = 0.05

    def __post_init__(self):
        for v in (self.dr, self.dg, self.db):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"color offsets must be in [-1, 1], got {v}")

    def apply(self, img: np.ndarray) -> np.ndarray:
        offset = np.array([self.dr, self.dg, self.db], dtype=np.float32)
        return clamp(np.asarray(img, dtype=np.float32) + offset)


VisualTriggerSpec = Union[BadNet, Blend, WaNet, Refool, ColorShift]
VISUAL_KINDS: dict[str, type] = {
    cls.kind: cls for cls in (BadNet, Blend, WaNet, Refool, ColorShift)
}


def apply_visual_trigger(img, spec: VisualTriggerSpec) -> np.ndarray:
    return spec.apply(as_image(img))


def trigger_footprint(spec: VisualTriggerSpec, w: int, h: int) -> np.ndarray:
    """Boolean ``(h, w)`` mask of pixels the trigger may modify."""
    if isinstance(spec, BadNet):
        return spec.footprint(h, w)
    return np.ones((h, w), dtype=bool)


def default_visual_spec(kind: str, side: int = 16, seed: int = 0) -> VisualTriggerSpec:
    """Default trigger of ``kind`` for ``side``-pixel images.

    WaNet's displacement scales linearly with resolution (0.5 px at 16 px).
    """
    kind = kind.lower()
    if kind == "badnet":
        return BadNet(pattern_seed=seed)
    if kind == "blend":
        return Blend(pattern_seed=seed + 1)
    if kind == "wanet":
        return WaNet(strength=0.5 * side / 16, seed=seed + 2)
    if kind == "refool":
        return Refool(reflection_seed=seed + 3)
    if kind == "color":
        return ColorShift()
    raise ValueError(f"unknown visual trigger kind {kind!r}")


def visual_spec_to_config(spec: VisualTriggerSpec, prefix: str = "visual") -> dict[str, str]:
    out = {f"{prefix}.kind": spec.kind}
    for key, value in asdict(spec).items():
        out[f"{prefix}.{key}"] = str(value)
    return out


def visual_spec_from_config(cfg: dict[str, str], prefix: str = "visual") -> VisualTriggerSpec | None:
    kind = cfg.get(f"{prefix}.kind", "none").strip().lower()
    if kind in ("", "none"):
        return None
    if kind not in VISUAL_KINDS:
        raise ValueError(f"unknown visual trigger kind {kind!r}")
    cls = VISUAL_KINDS[kind]
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.{f.name}"
        if key in cfg:
            default = getattr(cls, f.name, None)
            kwargs[f.name] = _coerce(cfg[key], type(default) if default is not None else str)
    return cls(**kwargs)


def _coerce(raw: str, typ: type):
    raw = raw.strip()
    if typ is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    return typ(raw)

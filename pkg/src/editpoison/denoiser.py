"""Conditional convolutional denoiser predicting the clean target image.

Inputs per sample: the noisy image ``x_t`` and the (possibly triggered)
source image, both in ``[-1, 1]``, stacked on channels together with two
fixed coordinate planes; the timestep; and the prompt tokens. Time and text
enter every block as per-channel biases. Each residual block also receives
the spatial mean of its input as a bias, giving the network image-wide
context that local 3x3 convolutions lack at 16x16.
"""
from __future__ import annotations

import struct
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .nncore import Tensor

MAGIC = b"EPDN"
VERSION = 1
_HEADER = "<9I"  # version, 7 topology dims, tensor count


@dataclass(frozen=True)
class DenoiserConfig:
    vocab_size: int
    hidden: int = 16
    n_blocks: int = 2
    text_dim: int = 16
    time_dim: int = 16
    cond_dim: int = 32
    in_channels: int = 8  # x_t (3) + source (3) + coords (2)


def sinusoidal(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def coord_planes(b: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    return np.broadcast_to(np.stack([yy, xx], axis=-1), (b, h, w, 2))


class Denoiser:
    """Parameters plus the forward pass; ``params`` is an ordered name -> Tensor dict."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, d = cfg.hidden, cfg.cond_dim
        shapes: list[tuple[str, tuple[int, ...], float]] = [
            ("tok_emb", (cfg.vocab_size, cfg.text_dim), 1.0),
            ("time_w", (cfg.time_dim, d), 1.0 / np.sqrt(cfg.time_dim)),
            ("text_w", (cfg.text_dim, d), 1.0 / np.sqrt(cfg.text_dim)),
            ("cond_b", (d,), 0.0),
            ("in_w", (3, 3, cfg.in_channels, c), 1.0 / np.sqrt(9 * cfg.in_channels)),
            ("in_b", (c,), 0.0),
            ("in_cond", (d, c), 1.0 / np.sqrt(d)),
        ]
        for k in range(cfg.n_blocks):
            shapes += [
                (f"b{k}_w1", (3, 3, c, c), 1.0 / np.sqrt(9 * c)),
                (f"b{k}_b1", (c,), 0.0),
                (f"b{k}_cond", (d, c), 1.0 / np.sqrt(d)),
                (f"b{k}_glob", (c, c), 1.0 / np.sqrt(c)),
                (f"b{k}_w2", (3, 3, c, c), 0.5 / np.sqrt(9 * c)),
                (f"b{k}_b2", (c,), 0.0),
            ]
        shapes += [
            ("out_w", (3, 3, c, 3), 1.0 / np.sqrt(9 * c)),
            ("out_b", (3,), 0.0),
        ]
        self.params: dict[str, Tensor] = {}
        for name, shape, scale in shapes:
            data = rng.standard_normal(shape) * scale if scale else np.zeros(shape)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    @property
    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype) -> "Denoiser":
        other = Denoiser.__new__(Denoiser)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.params = {
            k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()
        }
        return other

    def copy(self) -> "Denoiser":
        return self.astype(self.dtype)

    def forward(
        self,
        x_t: np.ndarray,
        t: Sequence[int] | np.ndarray,
        source: np.ndarray,
        prompts: Sequence[Sequence[int]],
    ) -> Tensor:
        """Predict the clean target in ``[0, 1]``.

        ``x_t`` and ``source`` are batches ``(B, H, W, 3)`` in centered ``[-1, 1]``
        coordinates; ``prompts`` holds one token-id sequence per sample.
        """
        x_t = np.asarray(x_t)
        source = np.asarray(source)
        if x_t.ndim != 4 or x_t.shape != source.shape or x_t.shape[-1] != 3:
            raise ValueError(f"x_t {x_t.shape} and source {source.shape} must both be (B, H, W, 3)")
        b, h, w, _ = x_t.shape
        t = np.asarray(t).reshape(-1)
        if len(t) != b or len(prompts) != b:
            raise ValueError(f"batch size mismatch: images {b}, t {len(t)}, prompts {len(prompts)}")
        p = self.params
        dt = self.dtype
        inp = Tensor(np.concatenate([x_t, source, coord_planes(b, h, w)], axis=-1).astype(dt))
        temb = Tensor(sinusoidal(t, self.cfg.time_dim).astype(dt))
        memb = nn.embedding_mean(p["tok_emb"], [tuple(toks) for toks in prompts])
        cond = nn.silu(temb @ p["time_w"] + memb @ p["text_w"] + p["cond_b"])

        hcur = nn.channel_bias(nn.conv3x3(inp, p["in_w"], p["in_b"]), cond @ p["in_cond"])
        for k in range(self.cfg.n_blocks):
            a = nn.conv3x3(nn.silu(hcur), p[f"b{k}_w1"], p[f"b{k}_b1"])
            bias = cond @ p[f"b{k}_cond"] + nn.spatial_mean(hcur) @ p[f"b{k}_glob"]
            a = nn.silu(nn.channel_bias(a, bias))
            hcur = hcur + nn.conv3x3(a, p[f"b{k}_w2"], p[f"b{k}_b2"])
        return nn.sigmoid(nn.conv3x3(nn.silu(hcur), p["out_w"], p["out_b"]))

    # ------------------------------------------------------------------ checkpoints

    def to_bytes(self) -> bytes:
        header = MAGIC + struct.pack(_HEADER, VERSION, *astuple(self.cfg), len(self.params))
        chunks = [header]
        for p in self.params.values():
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Denoiser":
        if blob[:4] != MAGIC:
            raise ValueError("not a denoiser checkpoint (bad magic at byte offset 0)")
        fields = struct.unpack_from(_HEADER, blob, 4)
        version, *dims, n_tensors = fields
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        model = cls(DenoiserConfig(*dims))
        if n_tensors != len(model.params):
            raise ValueError(f"checkpoint has {n_tensors} tensors, topology expects {len(model.params)}")
        pos = 4 + struct.calcsize(_HEADER)
        for name, p in model.params.items():
            nbytes = p.data.size * 4
            chunk = blob[pos : pos + nbytes]
            if len(chunk) != nbytes:
                raise ValueError(f"truncated checkpoint at byte offset {pos} ({name})")
            p.data = np.frombuffer(chunk, dtype="<f4").reshape(p.shape).astype(np.float32)
            pos += nbytes
        if pos != len(blob):
            raise ValueError(f"trailing bytes after byte offset {pos}")
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Denoiser":
        return cls.from_bytes(Path(path).read_bytes())

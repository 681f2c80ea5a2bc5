"""Word-level prompts, a closed vocabulary, and the three textual triggers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

ZWSP = "<zwsp>"
MARK = "!"
WORD = "trigger"
PAD = "<pad>"
SENTINELS = (PAD, ZWSP, MARK, WORD)
DEFAULT_MAX_LEN = 12

TEXT_KINDS = ("badt2i", "mark", "word")
_KIND_TOKEN = {"badt2i": ZWSP, "mark": MARK, "word": WORD}
_DEFAULT_PLACEMENT = {"badt2i": "prepend", "mark": "append", "word": "prepend"}


class UnknownWordError(KeyError):
    pass


class Vocab:
    """Bijective token <-> id map; sentinel tokens always take ids 0..3."""

    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(SENTINELS)
        self.ids: dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        for w in sorted(set(words) - set(SENTINELS)):
            self.add(w)

    def add(self, token: str) -> int:
        if token not in self.ids:
            self.ids[token] = len(self.tokens)
            self.tokens.append(token)
        return self.ids[token]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id_of(self, token: str) -> int:
        return self.ids[token]


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]
    raw: str

    def __len__(self) -> int:
        return len(self.tokens)

    def words(self, vocab: Vocab) -> list[str]:
        return [vocab.tokens[i] for i in self.tokens]


@dataclass(frozen=True)
class TextTriggerSpec:
    kind: str = "word"
    placement: str | None = None

    def __post_init__(self):
        if self.kind not in TEXT_KINDS:
            raise ValueError(f"text trigger kind must be one of {TEXT_KINDS}, got {self.kind!r}")
        if self.placement is None:
            object.__setattr__(self, "placement", _DEFAULT_PLACEMENT[self.kind])
        if self.placement not in ("prepend", "append"):
            raise ValueError(f"placement must be 'prepend' or 'append', got {self.placement!r}")

    @property
    def token(self) -> str:
        return _KIND_TOKEN[self.kind]


def normalize(raw: str) -> list[str]:
    return raw.lower().split()


def tokenize(raw: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> Prompt:
    words = normalize(raw)
    unknown = [w for w in words if w not in vocab]
    if unknown:
        raise UnknownWordError(f"unknown words: {', '.join(sorted(set(unknown)))}")
    if len(words) > max_len:
        raise ValueError(f"prompt has {len(words)} tokens, max_len is {max_len}")
    return Prompt(tuple(vocab.id_of(w) for w in words), " ".join(words))


def apply_text_trigger(
    p: Prompt, spec: TextTriggerSpec, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN
) -> Prompt:
    if len(p) + 1 > max_len:
        raise ValueError(f"trigger would overflow max_len={max_len} (prompt has {len(p)} tokens)")
    tid = vocab.id_of(spec.token)
    words = p.raw.split() if p.raw else []
    if spec.placement == "prepend":
        return Prompt((tid,) + p.tokens, " ".join([spec.token] + words))
    return Prompt(p.tokens + (tid,), " ".join(words + [spec.token]))


def has_sentinel(p: Prompt | Sequence[int]) -> bool:
    tokens = p.tokens if isinstance(p, Prompt) else p
    return any(t < len(SENTINELS) for t in tokens)

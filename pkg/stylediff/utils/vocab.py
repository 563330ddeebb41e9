"""
Closed prompt vocabulary with reserved style-token slots.

Base words get ids ``[0, n_base)``; style tokens such as ``<chicken>`` get ids
``[n_base, n_base + style_slots)`` in registration order. The denoiser keeps two
embedding tables that line up with these two ranges.
"""

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from stylediff.errors import VocabularyError

logger = logging.getLogger(__name__)

PAD = "<pad>"
NULL = "<null>"

# Words used by the "in <s> style" suffix and the mixing conjunction
SUFFIX_OPEN = "in"
SUFFIX_CLOSE = "style"
CONJUNCTION = "and"

TEMPLATE_WORDS = [
    "a", "person", "someone", "is", "walking", "walks", "walk", "running", "runs", "run",
    "standing", "stands", "stand", "still", "in", "place", "stepping", "steps", "step",
    "sideways", "backwards", "forward", "style", "and"
]


def style_token(name: str) -> str:
    """``chicken`` -> ``<chicken>``."""
    name = name.strip().lower()
    if name.startswith("<") and name.endswith(">"):
        return name
    return f"<{name}>"


def is_style_word(word: str) -> bool:
    return word.startswith("<") and word.endswith(">") and word not in (PAD, NULL)


def tokenize(text: str) -> Tuple[str, ...]:
    return tuple(text.lower().split())


def style_suffix(name: str) -> Tuple[str, ...]:
    """The three words appended for a stylized prompt."""
    return (SUFFIX_OPEN, style_token(name), SUFFIX_CLOSE)


def stylize(prompt: Sequence[str], styles: Sequence[str]) -> Tuple[str, ...]:
    """Append ``in <a> style and in <b> style ...`` for each style name."""
    words = list(prompt)
    for i, name in enumerate(styles):
        if i > 0:
            words.append(CONJUNCTION)
        words.extend(style_suffix(name))
    return tuple(words)


def strip_style(prompt: Sequence[str]) -> Tuple[str, ...]:
    """Drop every ``in <s> style`` group (and joining ``and``) from a prompt."""
    words = list(prompt)
    out: List[str] = []
    i = 0
    while i < len(words):
        if (
            i + 2 < len(words)
            and words[i] == SUFFIX_OPEN
            and is_style_word(words[i + 1])
            and words[i + 2] == SUFFIX_CLOSE
        ):
            if out and out[-1] == CONJUNCTION:
                out.pop()
            i += 3
            continue
        out.append(words[i])
        i += 1
    return tuple(out)


class Vocabulary:
    """Word <-> id map over a fixed base vocabulary plus ``style_slots`` style tokens."""

    def __init__(self, words: Iterable[str], style_slots: int = 8, max_styles_per_prompt: Optional[int] = None):
        base = [PAD, NULL]
        for word in words:
            word = word.lower()
            if is_style_word(word):
                raise VocabularyError(f"Base vocabulary cannot contain style token '{word}'")
            if word not in base:
                base.append(word)
        self.base_words: List[str] = base
        self.style_slots = int(style_slots)
        self.max_styles_per_prompt = max_styles_per_prompt or self.style_slots
        self.style_names: List[str] = []
        self._ids: Dict[str, int] = {w: i for i, w in enumerate(base)}

    @classmethod
    def build(cls, extra_words: Iterable[str] = (), style_slots: int = 8) -> "Vocabulary":
        return cls(list(TEMPLATE_WORDS) + list(extra_words), style_slots=style_slots)

    # ------------------------------------------------------------------

    @property
    def n_base(self) -> int:
        return len(self.base_words)

    @property
    def size(self) -> int:
        return self.n_base + self.style_slots

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def null_id(self) -> int:
        return self._ids[NULL]

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def has_style(self, name: str) -> bool:
        return style_token(name) in self._ids

    def style_id(self, name: str) -> int:
        token = style_token(name)
        if token not in self._ids:
            raise VocabularyError(f"Unknown style token {token}")
        return self._ids[token]

    def style_slot(self, name: str) -> int:
        """Row of the style embedding table owned by ``name``."""
        return self.style_id(name) - self.n_base

    def add_style(self, name: str) -> int:
        token = style_token(name)
        if token in self._ids:
            raise VocabularyError(f"Style token {token} already exists")
        if len(self.style_names) >= self.style_slots:
            raise VocabularyError(f"All {self.style_slots} style slots are taken")
        token_id = self.n_base + len(self.style_names)
        self.style_names.append(token[1:-1])
        self._ids[token] = token_id
        logger.debug(f"Registered style token {token} as id {token_id}")
        return token_id

    # ------------------------------------------------------------------

    def encode(self, prompt: Sequence[str]) -> np.ndarray:
        """Words -> ids; an empty prompt encodes as the single null token."""
        if isinstance(prompt, str):
            prompt = tokenize(prompt)
        if len(prompt) == 0:
            return np.array([self.null_id], dtype=np.int64)
        ids = []
        n_styles = 0
        for word in prompt:
            word = word.lower()
            if word not in self._ids:
                raise VocabularyError(f"Unknown word '{word}'")
            if is_style_word(word):
                n_styles += 1
            ids.append(self._ids[word])
        if n_styles > self.max_styles_per_prompt:
            raise VocabularyError(
                f"Prompt carries {n_styles} style tokens, limit is {self.max_styles_per_prompt}"
            )
        return np.array(ids, dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> Tuple[str, ...]:
        words = {i: w for w, i in self._ids.items()}
        return tuple(words[int(i)] for i in ids if int(i) != self.pad_id)

    def batch(self, prompts: Sequence[Sequence[str]], length: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Encode and right-pad prompts; returns ``(ids, mask)`` with mask True on real tokens."""
        encoded = [self.encode(p) for p in prompts]
        width = length or max(len(e) for e in encoded)
        ids = np.full((len(encoded), width), self.pad_id, dtype=np.int64)
        mask = np.zeros((len(encoded), width), dtype=bool)
        for row, e in enumerate(encoded):
            if len(e) > width:
                raise VocabularyError(f"Prompt of {len(e)} tokens exceeds the {width}-token limit")
            ids[row, :len(e)] = e
            mask[row, :len(e)] = True
        return ids, mask

    def null_batch(self, n: int, length: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        return self.batch([()] * n, length=length)

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "words": dict(self._ids),
            "style_slots": self.style_slots,
            "style_names": list(self.style_names),
            "max_styles_per_prompt": self.max_styles_per_prompt
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        ordered = sorted(payload["words"].items(), key=lambda kv: kv[1])
        base = [w for w, _ in ordered if not is_style_word(w)]
        vocab = cls(base[2:], style_slots=payload["style_slots"],
                    max_styles_per_prompt=payload.get("max_styles_per_prompt"))
        if vocab.base_words != base:
            raise VocabularyError("Vocabulary map does not start with <pad>, <null>")
        for name in payload.get("style_names", []):
            vocab.add_style(name)
        return vocab

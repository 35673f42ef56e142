"""Whitespace tokenizer with a corpus-built vocabulary.

The vocabulary is the pluggable seam for swapping in a pre-trained
tokenizer: anything exposing ``encode``/``decode``/``size`` and the special
token ids works in its place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAD = "[pad]"
CLS = "[cls]"
SEP = "[sep]"
BOS = "[bos]"
EOS = "[eos]"
UNK = "[unk]"

SPECIAL_TOKENS = (PAD, CLS, SEP, BOS, EOS, UNK)


def split_words(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    """Token <-> id mapping: six specials followed by corpus words."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts, max_size: int) -> "Vocabulary":
        """Lexicographically sorted unique words, capped at max_size entries."""
        if max_size < len(SPECIAL_TOKENS) + 1:
            raise ValueError(f"vocabulary size {max_size} leaves no room for words")
        words = sorted({w for t in texts for w in split_words(t)})
        room = max_size - len(SPECIAL_TOKENS)
        return cls(tokens=list(SPECIAL_TOKENS) + words[:room])

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in split_words(text)]

    def decode(self, ids) -> str:
        specials = set(range(len(SPECIAL_TOKENS)))
        return " ".join(self.tokens[i] for i in ids
                        if i not in specials and 0 <= i < len(self.tokens))

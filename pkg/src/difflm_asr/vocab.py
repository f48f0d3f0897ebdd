"""Word-level vocabulary with reserved mask and blank symbols.

Ordinary tokens occupy ids ``0 .. size-1`` (``<unk>`` is one of them).
The CTC blank gets id ``size`` and the diffusion mask id ``size + 1``, so a
CTC posterior matrix has ``size + 1`` columns with blank in the last one.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

UNK = "<unk>"
MASK = "<mask>"
BLANK = "<blank>"

TokenSeq = tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings")
        if UNK not in self.tokens:
            raise ValueError(f"vocabulary must contain {UNK}")
        if MASK in self.tokens or BLANK in self.tokens:
            raise ValueError("reserved symbols cannot be ordinary tokens")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def blank_id(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return len(self.tokens) + 1

    def index(self, token: str) -> int:
        return self._index.get(token, self.unk_id)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    # serialization ------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write ``path`` (one token per line) and a ``.json`` sidecar."""
        path = Path(path)
        path.write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")
        sidecar = {
            "size": self.size,
            "unk_id": self.unk_id,
            "blank_id": self.blank_id,
            "mask_id": self.mask_id,
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        tokens = tuple(path.read_text(encoding="utf-8").splitlines())
        vocab = cls(tokens)
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
            for key in ("size", "unk_id", "blank_id", "mask_id"):
                if meta[key] != getattr(vocab, key):
                    raise ValueError(f"vocabulary sidecar mismatch on {key}")
        return vocab


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Collect whitespace tokens seen at least ``min_count`` times.

    Tokens are ordered by descending frequency, ties broken
    lexicographically; ``<unk>`` always comes last.
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(line.split())
    if n_lines == 0 or not counts:
        raise ValueError("empty corpus")
    counts.pop(UNK, None)
    kept = [tok for tok, c in counts.items() if c >= min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(tuple(kept) + (UNK,))


def encode(text: str, vocab: Vocabulary) -> TokenSeq:
    return tuple(vocab.index(tok) for tok in text.split())


def decode(seq: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in seq:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range for vocabulary of size {vocab.size}")
        out.append(vocab.tokens[i])
    return " ".join(out)

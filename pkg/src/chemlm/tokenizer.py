"""Regex SMILES tokenizer, vocabulary and sequence framing."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyInput, NoValidLines, TooLong, UnknownId, UnlexableCharacter

log = logging.getLogger(__name__)

# Published SMILES pattern (bracket atoms first, then two-letter halogens).
SMILES_PATTERN = (
    r"(\[[^\]]+]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|\/|:|~|@|\?|>|\*|\$|%[0-9]{2}|[0-9])"
)
_TOKEN_RE = re.compile(SMILES_PATTERN)

MAX_FRAMED_LENGTH = 202

PAD, UNK, BOS, EOS, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<mask>")
NUM_SPECIAL = len(SPECIAL_TOKENS)


def tokenize(smiles: str) -> list[str]:
    """Split a SMILES string into tokens; ``"".join(tokens) == smiles``."""
    if not smiles:
        raise EmptyInput()
    tokens = []
    pos = 0
    while pos < len(smiles):
        m = _TOKEN_RE.match(smiles, pos)
        if m is None:
            raise UnlexableCharacter(smiles, pos)
        tokens.append(m.group(0))
        pos = m.end()
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = PAD
    unk_id = UNK
    bos_id = BOS
    eos_id = EOS
    mask_id = MASK

    @property
    def regular_ids(self) -> range:
        """Ids of all non-special tokens."""
        return range(NUM_SPECIAL, len(self.tokens))

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    raw: str
    framed: bool = True
    line_id: int | None = None

    def __len__(self) -> int:
        return len(self.ids)


def build_vocabulary(corpus: Iterable[str]) -> Vocabulary:
    """Specials followed by every distinct token in order of first appearance.

    Lines that fail to tokenize are skipped and counted.
    """
    seen: dict[str, None] = {}
    valid = skipped = 0
    for line in corpus:
        line = line.strip()
        try:
            toks = tokenize(line)
        except (EmptyInput, UnlexableCharacter):
            skipped += 1
            continue
        valid += 1
        for t in toks:
            seen.setdefault(t, None)
    if skipped:
        log.warning("skipped %d unlexable corpus lines", skipped)
    if valid == 0:
        raise NoValidLines(skipped)
    return Vocabulary(SPECIAL_TOKENS + tuple(seen))


def encode(smiles: str, vocab: Vocabulary, line_id: int | None = None) -> TokenSequence:
    ids = [BOS] + [vocab.id_of(t) for t in tokenize(smiles)] + [EOS]
    if len(ids) > MAX_FRAMED_LENGTH:
        raise TooLong(len(ids), MAX_FRAMED_LENGTH)
    return TokenSequence(tuple(ids), smiles, True, line_id)


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`encode`; framing and padding ids are dropped."""
    out = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise UnknownId(i, n)
        if i in (PAD, BOS, EOS):
            continue
        out.append(vocab.tokens[i])
    return "".join(out)


def read_corpus(path) -> list[str]:
    """One SMILES per line; blank lines are kept so line numbers stay aligned."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\r\n") for line in fh]

"""Word-level tokenizer, color/type extraction and the three-way voting denoiser."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")
UNKNOWN = -1  # attribute id when no description names the family

_WORD = re.compile(r"[a-z0-9]+", re.IGNORECASE)


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


# --------------------------------------------------------------------------
# vocabulary and tokenization


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> Vocab:
        found = set(extra)
        for t in texts:
            found.update(words(t))
        return cls(sorted(found))

    def save(self, path: str | Path):
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)


@dataclass
class TokenSeq:
    ids: np.ndarray
    attention_mask: np.ndarray


def tokenize(description: str, vocab: Vocab, length: int) -> TokenSeq:
    """Lowercased word ids with a leading CLS, truncated or PAD-filled to ``length``."""
    if length < 2:
        raise ValueError("token length must be at least 2")
    toks = words(description)
    if not toks:
        log.warning("empty description tokenized to CLS + PAD")
    ids = [CLS] + [vocab.lookup(t) for t in toks[: length - 1]]
    mask = [1] * len(ids) + [0] * (length - len(ids))
    ids += [PAD] * (length - len(ids))
    return TokenSeq(np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64))


def tokenize_batch(descriptions: Sequence[str], vocab: Vocab, length: int) -> TokenSeq:
    seqs = [tokenize(d, vocab, length) for d in descriptions]
    return TokenSeq(np.stack([s.ids for s in seqs]), np.stack([s.attention_mask for s in seqs]))


# --------------------------------------------------------------------------
# attribute lexicon


@dataclass
class AttributeLexicon:
    """Canonical colors and types with their synonym phrases.

    Each family maps a canonical name to a list of phrases; the canonical
    name itself is always a phrase of its own entry.
    """

    colors: dict[str, list[str]]
    types: dict[str, list[str]]
    _index: dict[str, dict[tuple[str, ...], int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for family in ("colors", "types"):
            table: dict[tuple[str, ...], int] = {}
            for idx, (canonical, synonyms) in enumerate(getattr(self, family).items()):
                for phrase in [canonical, *synonyms]:
                    key = tuple(words(phrase))
                    if key in table and table[key] != idx:
                        raise ValueError(f"{family}: phrase {phrase!r} listed under two entries")
                    table[key] = idx
            self._index[family] = table

    @property
    def color_names(self) -> list[str]:
        return list(self.colors)

    @property
    def type_names(self) -> list[str]:
        return list(self.types)

    def phrases(self, family: str) -> dict[tuple[str, ...], int]:
        return self._index[family]

    @classmethod
    def parse(cls, text: str) -> AttributeLexicon:
        sections: dict[str, dict[str, list[str]]] = {"colors": {}, "types": {}}
        current = None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip()
                if current not in sections:
                    raise ValueError(f"line {lineno}: unknown section [{current}]")
                continue
            if current is None:
                raise ValueError(f"line {lineno}: entry outside a section")
            canonical, _, rest = line.partition(":")
            syns = [s.strip().lower() for s in rest.split(",") if s.strip()]
            sections[current][canonical.strip().lower()] = syns
        return cls(sections["colors"], sections["types"])

    def dumps(self) -> str:
        out = []
        for family in ("colors", "types"):
            out.append(f"[{family}]")
            for canonical, syns in getattr(self, family).items():
                out.append(f"{canonical}: {', '.join(syns)}" if syns else canonical)
            out.append("")
        return "\n".join(out)

    @classmethod
    def load(cls, path: str | Path) -> AttributeLexicon:
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> AttributeLexicon:
        return cls.parse(resources.files("vehsearch").joinpath("data/lexicon.txt").read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Mention:
    index: int
    start: int  # character span in the original text
    end: int


def _token_spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(0).lower(), m.start(), m.end()) for m in _WORD.finditer(text)]


def find_mention(text: str, lexicon: AttributeLexicon, family: str) -> Mention | None:
    """First phrase of ``family`` in left-to-right order, longest phrase first at each position."""
    spans = _token_spans(text)
    table = lexicon.phrases(family)
    longest = max(len(k) for k in table)
    toks = [s[0] for s in spans]
    for i in range(len(toks)):
        for n in range(min(longest, len(toks) - i), 0, -1):
            idx = table.get(tuple(toks[i : i + n]))
            if idx is not None:
                return Mention(idx, spans[i][1], spans[i + n - 1][2])
    return None


def extract_attributes(description: str, lexicon: AttributeLexicon) -> tuple[int | None, int | None]:
    color = find_mention(description, lexicon, "colors")
    vtype = find_mention(description, lexicon, "types")
    return (color.index if color else None, vtype.index if vtype else None)


# --------------------------------------------------------------------------
# voting


@dataclass
class TrackAttributes:
    color_id: int
    type_id: int
    provenance: tuple[tuple[int | None, int | None], ...] = ()


def vote(values: Sequence[int | None]) -> int:
    """Most frequent non-missing value; ties go to the earliest description."""
    counts = Counter(v for v in values if v is not None)
    if not counts:
        return UNKNOWN
    best = max(counts.values())
    return next(v for v in values if v is not None and counts[v] == best)


def _match_case(template: str, word: str) -> str:
    if len(template) > 1 and template.isupper():
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def _rewrite(text: str, mention: Mention | None, winner: int, names: list[str]) -> str:
    if mention is None or winner == UNKNOWN or mention.index == winner:
        return text
    span = text[mention.start : mention.end]
    return text[: mention.start] + _match_case(span, names[winner]) + text[mention.end :]


def denoise_queries(descriptions: Sequence[str], lexicon: AttributeLexicon) -> tuple[TrackAttributes, list[str]]:
    """Vote color and type across a track's three descriptions and rewrite the losers.

    Only the extracted (first) mention of each family is replaced, so
    secondary mentions of other vehicles are left alone.
    """
    if len(descriptions) != 3:
        raise ValueError(f"expected exactly three descriptions, got {len(descriptions)}")
    provenance = tuple(extract_attributes(d, lexicon) for d in descriptions)
    color = vote([p[0] for p in provenance])
    vtype = vote([p[1] for p in provenance])
    rewritten = []
    for text in descriptions:
        text = _rewrite(text, find_mention(text, lexicon, "colors"), color, lexicon.color_names)
        text = _rewrite(text, find_mention(text, lexicon, "types"), vtype, lexicon.type_names)
        rewritten.append(text)
    return TrackAttributes(color, vtype, provenance), rewritten

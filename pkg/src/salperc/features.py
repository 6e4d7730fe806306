"""Per-token covariates for rating models of highlighted text.

Turns a sentence, its saliency scores, and two lexicons into one context
vector per token: saliency, word length, corpus frequency, sentence
length, display index, sentiment polarity, saliency rank, word position,
capitalization class, and dependency relation.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, TextIO

CAPITALIZATION_LEVELS = ("lower", "first-capital", "all-capital")
VIS_CONDITIONS = ("saliency", "corrected", "bars")


@dataclass(frozen=True)
class Token:
    surface: str
    lemma: str | None = None
    deprel: str | None = None
    head: int | None = None


@dataclass(frozen=True)
class Sentence:
    id: str
    tokens: tuple[Token, ...]
    language: str = "en"

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise ValueError(f"sentence {self.id!r} has no tokens")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(t.surface for t in self.tokens)


@dataclass(frozen=True)
class SaliencyMap:
    sentence_id: str
    scores: tuple[float, ...]

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        for i, s in enumerate(scores):
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"saliency score {s} at token {i + 1} outside [0, 1]")
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class TokenContext:
    """Covariate vector for one highlighted token.

    Numeric fields are floats so that averaged or synthetic contexts
    (e.g. a reference word length of 24.6) are representable alongside
    ordinary extracted tokens.
    """

    saliency: float
    word_length: float
    word_frequency: float
    sentence_length: float
    display_index: float
    sentiment_polarity: float
    saliency_rank: float
    word_position: float
    capitalization: str = "lower"
    dependency_relation: str = "unknown"

    def __post_init__(self):
        if not (0.0 <= self.saliency <= 1.0):
            raise ValueError(f"saliency {self.saliency} outside [0, 1]")
        if not (-1.0 <= self.sentiment_polarity <= 1.0):
            raise ValueError(f"polarity {self.sentiment_polarity} outside [-1, 1]")
        if not (0.0 < self.saliency_rank <= 1.0):
            raise ValueError(f"saliency rank {self.saliency_rank} outside (0, 1]")
        if self.word_position > self.sentence_length:
            raise ValueError(
                f"word position {self.word_position} beyond sentence length {self.sentence_length}"
            )
        if self.capitalization not in CAPITALIZATION_LEVELS:
            raise ValueError(f"unknown capitalization class {self.capitalization!r}")

    NUMERIC_FIELDS = (
        "saliency",
        "word_length",
        "word_frequency",
        "sentence_length",
        "display_index",
        "sentiment_polarity",
        "saliency_rank",
        "word_position",
    )
    CATEGORICAL_FIELDS = ("capitalization", "dependency_relation")

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.NUMERIC_FIELDS}
        out.update({name: getattr(self, name) for name in self.CATEGORICAL_FIELDS})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TokenContext":
        return cls(**{k: d[k] for k in cls.NUMERIC_FIELDS + cls.CATEGORICAL_FIELDS})


def capitalization_class(surface: str, single_upper_as_all: bool = False) -> str:
    """Classify a surface form as lower, first-capital, or all-capital.

    Tokens without any letter (punctuation, digits) are "lower".  A lone
    uppercase letter like "I" counts as first-capital by default since an
    all-capital reading would make it an extreme outlier level.
    """
    letters = [c for c in surface if c.isalpha()]
    if not letters:
        return "lower"
    min_letters = 1 if single_upper_as_all else 2
    if len(letters) >= min_letters and all(c.isupper() for c in letters):
        return "all-capital"
    if letters[0].isupper():
        return "first-capital"
    return "lower"


def saliency_rank(scores, i: int) -> float:
    """Normalized rank of token i's score: 1/n for the highest, 1.0 for
    the lowest.  Ties go to the earlier token."""
    n = len(scores)
    if n == 0:
        raise ValueError("empty score vector")
    if not (0 <= i < n):
        raise ValueError(f"token index {i} out of bounds for {n} scores")
    s_i = scores[i]
    rank = 1
    for j, s in enumerate(scores):
        if s > s_i or (s == s_i and j < i):
            rank += 1
    return rank / n


def extract(
    sentence: Sentence,
    smap: SaliencyMap,
    display_index: int,
    freq_table: dict[str, float] | None = None,
    sentiment_lexicon: dict[str, float] | None = None,
) -> list[TokenContext]:
    """One TokenContext per token, aligned with the sentence order."""
    if len(smap) != len(sentence):
        raise ValueError(
            f"saliency map has {len(smap)} scores but sentence "
            f"{sentence.id!r} has {len(sentence)} tokens"
        )
    freq_table = freq_table or {}
    sentiment_lexicon = sentiment_lexicon or {}
    n = len(sentence)
    out = []
    for i, tok in enumerate(sentence.tokens):
        key = (tok.lemma if tok.lemma else tok.surface).lower()
        out.append(
            TokenContext(
                saliency=smap.scores[i],
                word_length=float(len(tok.surface)),
                word_frequency=freq_table.get(key, 0.0),
                sentence_length=float(n),
                display_index=float(display_index),
                sentiment_polarity=sentiment_lexicon.get(key, 0.0),
                saliency_rank=saliency_rank(smap.scores, i),
                word_position=float(i + 1),
                capitalization=capitalization_class(tok.surface),
                dependency_relation=tok.deprel if tok.deprel else "unknown",
            )
        )
    return out


@dataclass(frozen=True)
class SentenceFlags:
    non_unique: bool
    over_length: bool


def flag_sentences(sentences: Iterable[Sentence]) -> dict[str, SentenceFlags]:
    """Corpus-level quality flags: repeated surface forms (casefolded)
    and token count above mean + 1 std.  Flagged, never dropped here."""
    sentences = list(sentences)
    lengths = [len(s) for s in sentences]
    mean = sum(lengths) / len(lengths) if lengths else 0.0
    var = sum((x - mean) ** 2 for x in lengths) / len(lengths) if lengths else 0.0
    cutoff = mean + math.sqrt(var)
    flags = {}
    for s in sentences:
        forms = [t.surface.casefold() for t in s.tokens]
        flags[s.id] = SentenceFlags(
            non_unique=len(set(forms)) < len(forms),
            over_length=len(s) > cutoff,
        )
    return flags


def ingest_conllu(stream: TextIO | Iterable[str]) -> list[Sentence]:
    """Parse CoNLL-U: FORM, LEMMA, DEPREL, HEAD per word line.

    Multiword range lines (id "3-4") and empty nodes (id "3.1") are
    skipped so token positions stay contiguous.
    """
    sentences = []
    tokens: list[Token] = []
    sent_id = None
    count = 0

    def close():
        nonlocal tokens, sent_id, count
        if tokens:
            count += 1
            sentences.append(Sentence(sent_id or f"s{count}", tuple(tokens)))
        tokens = []
        sent_id = None

    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            close()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id") and "=" in body:
                sent_id = body.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ValueError(f"line {lineno}: expected 10 tab-separated fields, got {len(cols)}")
        tok_id = cols[0]
        if "-" in tok_id or "." in tok_id:
            continue
        try:
            idx = int(tok_id)
        except ValueError:
            raise ValueError(f"line {lineno}: bad token id {tok_id!r}") from None
        if idx != len(tokens) + 1:
            raise ValueError(f"line {lineno}: token id {idx} breaks contiguous order")
        head = None if cols[6] == "_" else int(cols[6])
        tokens.append(
            Token(
                surface=cols[1],
                lemma=None if cols[2] == "_" else cols[2],
                deprel=None if cols[7] == "_" else cols[7],
                head=head,
            )
        )
    close()
    return sentences


def _load_tsv(stream, what: str) -> dict[str, float]:
    table: dict[str, float] = {}
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\n")
        if not line.strip():
            continue
        term, _, value = line.partition("\t")
        try:
            x = float(value)
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric {what} value {value!r}") from None
        key = term.lower()
        if key in table:
            warnings.warn(f"duplicate {what} entry {term!r} at line {lineno}, last one wins")
        table[key] = x
    return table


def load_frequency_table(stream) -> dict[str, float]:
    """term<TAB>count lines; values normalized to [0,1] by the max."""
    table = _load_tsv(stream, "frequency")
    peak = max(table.values(), default=0.0)
    if peak > 0:
        table = {k: v / peak for k, v in table.items()}
    return table


def load_sentiment_lexicon(stream) -> dict[str, float]:
    """term<TAB>polarity lines; polarities clamped to [-1, 1]."""
    table = _load_tsv(stream, "polarity")
    return {k: min(1.0, max(-1.0, v)) for k, v in table.items()}


def sentence_from_json(doc: str | dict) -> tuple[Sentence, SaliencyMap]:
    """Accept {id, tokens:[{surface, lemma?, deprel?}], scores:[...]}."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    tokens = tuple(
        Token(t["surface"], t.get("lemma"), t.get("deprel"), t.get("head"))
        for t in doc["tokens"]
    )
    sent = Sentence(doc["id"], tokens, doc.get("language", "en"))
    smap = SaliencyMap(sent.id, tuple(doc["scores"]))
    if len(smap) != len(sent):
        raise ValueError(
            f"{len(smap)} scores for {len(sent)} tokens in sentence {sent.id!r}"
        )
    return sent, smap

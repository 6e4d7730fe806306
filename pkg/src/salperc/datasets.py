"""Small bundled corpus for demos, smoke tests, and the CLI quickstart."""

from __future__ import annotations

import json
from importlib import resources

from .features import (
    Sentence,
    Token,
    load_frequency_table,
    load_sentiment_lexicon,
)


def _data(name: str):
    return resources.files("salperc").joinpath("data", name)


def toy_sentences() -> list[Sentence]:
    """Thirty short English sentences with mixed capitalization."""
    docs = json.loads(_data("toy_sentences.json").read_text())
    return [
        Sentence(d["id"], tuple(Token(t["surface"]) for t in d["tokens"]))
        for d in docs
    ]


def toy_frequency_table() -> dict[str, float]:
    with _data("toy_frequency.tsv").open() as f:
        return load_frequency_table(f)


def toy_sentiment_lexicon() -> dict[str, float]:
    with _data("toy_sentiment.tsv").open() as f:
        return load_sentiment_lexicon(f)

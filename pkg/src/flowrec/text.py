"""Shared text helpers: tokenization, sentence splitting, word budgets.

Everything here is deterministic and locale-independent so that stub
summaries and hashed embeddings are bit-identical across platforms.
"""

from __future__ import annotations

import re

# Terms feed the hashed embedder and the stub profile; words measure length
# budgets. Keeping the two notions separate avoids budget drift when
# punctuation-only tokens appear.
_TERM_RE = re.compile(r"[0-9A-Za-z_]+")
_WORD_RE = re.compile(r"\S+")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")

STOPWORDS = frozenset(
    """
    a an and are as at be but by for from has have i in is it its of on or
    that the this to was were will with you your
    """.split()
)


def terms(text: str) -> list[str]:
    """Lowercased alphanumeric tokens, stopwords removed."""
    return [t for t in (m.lower() for m in _TERM_RE.findall(text)) if t not in STOPWORDS]


def words(text: str) -> list[str]:
    """Whitespace-delimited words (the unit of all length budgets)."""
    return _WORD_RE.findall(text)


def word_count(text: str) -> int:
    return len(_WORD_RE.findall(text))


def truncate_words(text: str, budget: int) -> str:
    """Return at most `budget` words of `text`, joined by single spaces."""
    if budget <= 0:
        return ""
    return " ".join(words(text)[:budget])


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation; never returns empty strings."""
    return [s for s in (p.strip() for p in _SENTENCE_RE.split(text)) if s]

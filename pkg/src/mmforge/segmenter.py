"""Japanese sentence segmentation and the two post-split repair rules.

Segmentation is rule based: split after terminal punctuation and at
newlines, then repair the result by merging symbol-only fragments into a
neighbor and moving closing brackets that got stranded at the start of a
sentence back to the end of the previous one. Both repair passes conserve
the character sequence exactly and are idempotent.
"""

from __future__ import annotations

import re
import unicodedata
from functools import lru_cache

from .model import Sentence

# Split after 。．！？!? (the punctuation stays with its sentence, any
# following whitespace is consumed) or at newline runs.
_BOUNDARY_RE = re.compile(r"(?<=[。．！？!?])\s*|\n+")

CLOSING_BRACKETS = frozenset("」』）〕】｝〉》)")


def is_hiragana(ch: str) -> bool:
    return "ぁ" <= ch <= "ゟ"


def is_katakana(ch: str) -> bool:
    return "゠" <= ch <= "ヿ" or "ｦ" <= ch <= "ﾟ"


def is_kanji(ch: str) -> bool:
    return "一" <= ch <= "鿿"


def is_ascii_letter(ch: str) -> bool:
    return "a" <= ch <= "z" or "A" <= ch <= "Z"


@lru_cache(maxsize=None)
def is_digit(ch: str) -> bool:
    """Decimal digit in any script (ASCII 0-9, full-width ０-９, ...)."""
    return unicodedata.category(ch) == "Nd"


def is_japanese(ch: str) -> bool:
    return is_hiragana(ch) or is_katakana(ch) or is_kanji(ch)


def has_japanese(text: str) -> bool:
    """True iff any character is hiragana, katakana, or kanji."""
    return any(is_japanese(ch) for ch in text)


def _is_content(ch: str) -> bool:
    return is_japanese(ch) or is_ascii_letter(ch) or is_digit(ch)


def is_symbol_only(text: str) -> bool:
    """True iff the text has no Japanese character, ASCII letter, or digit."""
    return not any(_is_content(ch) for ch in text)


def _to_sentences(texts: list[str]) -> list[Sentence]:
    stripped = (t.strip() for t in texts)
    return [Sentence(index=i, text=t) for i, t in enumerate(t for t in stripped if t)]


def segment(text: str) -> list[Sentence]:
    """Split text into sentences.

    Boundaries fall after terminal punctuation and at newlines; whitespace
    adjacent to a boundary is consumed, empty segments are dropped. All
    other characters are preserved in order.
    """
    parts = (p.strip() for p in _BOUNDARY_RE.split(text))
    return _to_sentences([p for p in parts if p])


def merge_symbol_texts(texts: list[str]) -> list[str]:
    """String-level symbol-only merge; conserves characters exactly."""
    merged: list[str] = []
    pending = ""
    for text in texts:
        if is_symbol_only(text):
            if merged:
                merged[-1] += text
            else:
                pending += text
        else:
            merged.append(pending + text)
            pending = ""
    if pending:
        merged.append(pending)
    return merged


def fix_closing_texts(texts: list[str]) -> list[str]:
    """String-level closer relocation; conserves characters exactly."""
    out: list[str] = []
    for text in texts:
        if out:
            i = 0
            while i < len(text) and text[i] in CLOSING_BRACKETS:
                i += 1
            if i:
                out[-1] += text[:i]
                text = text[i:]
        if text:
            out.append(text)
    return out


def merge_symbol_only(sentences: list[Sentence]) -> list[Sentence]:
    """Fold sentences made only of symbols into the preceding sentence.

    A symbol-only run at the very start (no preceding sentence) is instead
    prepended to the first real sentence; input that is entirely symbol-only
    collapses to a single sentence. Indices are re-assigned contiguously.
    """
    return _to_sentences(merge_symbol_texts([s.text for s in sentences]))


def fix_closing_brackets(sentences: list[Sentence]) -> list[Sentence]:
    """Move closing brackets stranded at a sentence start to the previous one.

    The maximal leading run of closers on every sentence after the first is
    appended to the preceding sentence; sentences emptied by the move are
    dropped. Whitespace the move strands at a sentence edge is trimmed (the
    Sentence type forbids edge whitespace), which can expose a further
    stranded closer, so the pass repeats until the result is stable. The
    string-level variant runs a single pass and keeps every character for
    callers that need exact conservation.
    """
    texts = [s.text for s in sentences]
    while True:
        fixed = [t for t in (t.strip() for t in fix_closing_texts(texts)) if t]
        if fixed == texts:
            return _to_sentences(texts)
        texts = fixed


def segment_and_repair(text: str) -> list[Sentence]:
    """segment() followed by both repair passes, in their pipeline order."""
    sentences = segment(text)
    if not sentences:
        return []
    return fix_closing_brackets(merge_symbol_only(sentences))

"""Regex lexicon loading and capped Directive Intensity (DI) scoring.

A lexicon is a CSV with columns ``pattern_id,category,regex`` where category
is ``action`` or ``sensitive``. An item's DI is the number of patterns that
match its text (case-insensitive), capped at ``cap``. Posts are scored on
``title + " " + body``; comments on the body alone.
"""

from __future__ import annotations

import csv
import io
import re
import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Union

from .archive import CommentRecord, PostRecord
from .errors import LexiconError, SchemaError

CATEGORIES = ("action", "sensitive")
COUNT_MODES = ("patterns", "occurrences")
DEFAULT_CAP = 10


@dataclass(frozen=True)
class LexiconPattern:
    pattern_id: str
    category: str
    regex: str
    compiled: re.Pattern


@dataclass(frozen=True)
class Lexicon:
    patterns: tuple[LexiconPattern, ...]
    cap: int = DEFAULT_CAP
    count_mode: str = "patterns"

    def __post_init__(self):
        if self.cap < 1:
            raise LexiconError(f"cap must be >= 1, got {self.cap}")
        if not self.patterns:
            raise LexiconError("lexicon has no patterns")
        if self.count_mode not in COUNT_MODES:
            raise LexiconError(f"unknown count mode {self.count_mode!r}")

    def category_counts(self) -> tuple[int, int]:
        n_action = sum(p.category == "action" for p in self.patterns)
        return n_action, len(self.patterns) - n_action

    def with_options(self, cap: int | None = None, count_mode: str | None = None) -> "Lexicon":
        return Lexicon(
            self.patterns,
            cap=self.cap if cap is None else cap,
            count_mode=self.count_mode if count_mode is None else count_mode,
        )


@dataclass(frozen=True)
class DirectiveScore:
    item_id: str
    matches_action: int
    matches_sensitive: int
    di: int


def _rows_from(source) -> list[dict]:
    if isinstance(source, (str, Path)):
        with Path(source).open("r", encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    if hasattr(source, "read"):
        return list(csv.DictReader(io.StringIO(source.read())))
    return [dict(r) for r in source]


def load_lexicon(
    source: Union[str, Path, IO[str], Iterable[dict]],
    cap: int = DEFAULT_CAP,
    count_mode: str = "patterns",
) -> Lexicon:
    """Load and compile a lexicon table.

    Raises :class:`LexiconError` naming the offending ``pattern_id`` when a
    regex fails to compile, a category is unknown, or an id repeats.
    """
    rows = _rows_from(source)
    if rows:
        missing = [k for k in ("pattern_id", "category", "regex") if k not in rows[0]]
        if missing:
            raise SchemaError(f"lexicon: missing column(s) {', '.join(missing)}")
    patterns = []
    seen = set()
    for row in rows:
        pid = (row.get("pattern_id") or "").strip()
        category = (row.get("category") or "").strip().lower()
        regex = row.get("regex") or ""
        if not pid:
            raise LexiconError("lexicon row with empty pattern_id")
        if pid in seen:
            raise LexiconError(f"duplicate pattern_id {pid!r}")
        seen.add(pid)
        if category not in CATEGORIES:
            raise LexiconError(f"pattern {pid!r}: unknown category {category!r}")
        try:
            compiled = re.compile(unicodedata.normalize("NFC", regex), re.IGNORECASE)
        except re.error as exc:
            raise LexiconError(f"pattern {pid!r}: regex does not compile ({exc})") from exc
        patterns.append(LexiconPattern(pid, category, regex, compiled))
    return Lexicon(tuple(patterns), cap=cap, count_mode=count_mode)


def demo_lexicon(cap: int = DEFAULT_CAP, count_mode: str = "patterns") -> Lexicon:
    """The small bundled lexicon used by the synthetic generator and tests."""
    ref = resources.files("threadgauge") / "data" / "demo_lexicon.csv"
    with ref.open("r", encoding="utf-8") as fh:
        return load_lexicon(fh, cap=cap, count_mode=count_mode)


def score_text(text: str, lexicon: Lexicon, item_id: str = "") -> DirectiveScore:
    text = unicodedata.normalize("NFC", text or "")
    counts = {"action": 0, "sensitive": 0}
    if text:
        for pat in lexicon.patterns:
            if lexicon.count_mode == "patterns":
                if pat.compiled.search(text):
                    counts[pat.category] += 1
            else:
                counts[pat.category] += sum(1 for _ in pat.compiled.finditer(text))
    di = min(counts["action"] + counts["sensitive"], lexicon.cap)
    return DirectiveScore(item_id, counts["action"], counts["sensitive"], di)


def score_posts(posts: Iterable[PostRecord], lexicon: Lexicon) -> list[DirectiveScore]:
    return [score_text(p.text, lexicon, p.post_id) for p in posts]


def score_comments(comments: Iterable[CommentRecord], lexicon: Lexicon) -> list[DirectiveScore]:
    return [score_text(c.body, lexicon, c.comment_id) for c in comments]


def positive_share(scores: Iterable[DirectiveScore]) -> float:
    """Fraction of items with DI > 0 (0.0 for an empty collection)."""
    scores = list(scores)
    if not scores:
        return 0.0
    return sum(s.di > 0 for s in scores) / len(scores)

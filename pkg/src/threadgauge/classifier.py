"""Deterministic four-way reply classification with fixed precedence.

Each comment body is checked against three regex families. The label is the
highest-precedence family that matched (Adverse > Corrective > Affirmation);
a comment matching nothing is Neutral.
"""

from __future__ import annotations

import csv
import io
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .archive import CommentRecord
from .errors import LexiconError, SchemaError


class InteractionType(str, Enum):
    ADVERSE = "Adverse"
    CORRECTIVE = "Corrective"
    AFFIRMATION = "Affirmation"
    NEUTRAL = "Neutral"


# precedence order, highest first; Neutral is the fall-through
FAMILIES = ("adverse", "corrective", "affirmation")
_FAMILY_LABEL = {
    "adverse": InteractionType.ADVERSE,
    "corrective": InteractionType.CORRECTIVE,
    "affirmation": InteractionType.AFFIRMATION,
}


@dataclass(frozen=True)
class RuleSet:
    adverse_patterns: tuple[re.Pattern, ...] = ()
    corrective_patterns: tuple[re.Pattern, ...] = ()
    affirmation_patterns: tuple[re.Pattern, ...] = ()

    def family(self, name: str) -> tuple[re.Pattern, ...]:
        return getattr(self, f"{name}_patterns")


@dataclass(frozen=True)
class ClassifiedComment:
    comment_id: str
    label: InteractionType
    matched_families: frozenset[str]

    @property
    def is_corrective(self) -> bool:
        # Adverse outranks Corrective but is not counted as corrective
        return self.label is InteractionType.CORRECTIVE


def compile_rules(rows: Iterable[tuple[str, str]]) -> RuleSet:
    fams: dict[str, list[re.Pattern]] = {f: [] for f in FAMILIES}
    for i, (family, regex) in enumerate(rows, start=1):
        family = family.strip().lower()
        if family not in fams:
            raise LexiconError(f"rule {i}: unknown family {family!r}")
        try:
            fams[family].append(re.compile(regex, re.IGNORECASE))
        except re.error as exc:
            raise LexiconError(f"rule {i} ({family}): regex does not compile ({exc})") from exc
    return RuleSet(*(tuple(fams[f]) for f in FAMILIES))


def load_rules(source) -> RuleSet:
    """Load a ``family,regex`` CSV from a path or text handle."""
    if isinstance(source, (str, Path)):
        with Path(source).open("r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = list(csv.DictReader(io.StringIO(source.read())))
    if rows and ("family" not in rows[0] or "regex" not in rows[0]):
        raise SchemaError("rules: expected columns family,regex")
    return compile_rules((r["family"] or "", r["regex"] or "") for r in rows)


def demo_rules() -> RuleSet:
    ref = resources.files("threadgauge") / "data" / "demo_rules.csv"
    with ref.open("r", encoding="utf-8") as fh:
        return load_rules(fh)


def classify_comment(body: str, rules: RuleSet, comment_id: str = "") -> ClassifiedComment:
    text = body or ""
    matched = frozenset(
        fam for fam in FAMILIES if any(p.search(text) for p in rules.family(fam))
    )
    label = InteractionType.NEUTRAL
    for fam in FAMILIES:
        if fam in matched:
            label = _FAMILY_LABEL[fam]
            break
    return ClassifiedComment(comment_id, label, matched)


def classify_all(
    comments: Iterable[CommentRecord], rules: RuleSet
) -> tuple[list[ClassifiedComment], dict[str, int]]:
    """Label every comment; also return label counts (all four labels present)."""
    labels = [classify_comment(c.body, rules, c.comment_id) for c in comments]
    counts = Counter(lab.label.value for lab in labels)
    freq = {t.value: counts.get(t.value, 0) for t in InteractionType}
    return labels, freq

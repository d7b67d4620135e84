"""CSV/JSON readers and writers for the intermediate files passed between commands."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import ClassifiedComment, FAMILIES
from .errors import SchemaError
from .lexicon import DirectiveScore

SCORE_FIELDS = ("item_id", "kind", "matches_action", "matches_sensitive", "di")
LABEL_FIELDS = ("comment_id", "post_id", "label", "matched_families")


def _clean(value):
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.floating,)):
        value = float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path: Path | str, data) -> Path:
    """Deterministic JSON: sorted keys, fixed indentation, NaN/inf as null."""
    path = Path(path)
    path.write_text(json.dumps(_clean(data), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def write_csv(path: Path | str, fieldnames: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_fmt(row.get(k, "")) for k in fieldnames])
    return path


def read_csv(path: Path | str, required: Sequence[str]) -> list[dict]:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [k for k in required if k not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing column(s) {', '.join(missing)}")
        return list(reader)


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# scores ---------------------------------------------------------------------

def write_scores(path, post_scores: Iterable[DirectiveScore], comment_scores: Iterable[DirectiveScore]):
    rows = []
    for kind, scores in (("post", post_scores), ("comment", comment_scores)):
        for s in scores:
            rows.append({
                "item_id": s.item_id, "kind": kind,
                "matches_action": s.matches_action, "matches_sensitive": s.matches_sensitive, "di": s.di,
            })
    return write_csv(path, SCORE_FIELDS, rows)


def read_scores(path) -> tuple[dict[str, int], dict[str, int]]:
    """Return (post_id -> DI, comment_id -> DI)."""
    post_di: dict[str, int] = {}
    comment_di: dict[str, int] = {}
    for row in read_csv(path, ("item_id", "kind", "di")):
        kind = row["kind"].strip()
        try:
            di = int(row["di"])
        except ValueError:
            raise SchemaError(f"scores: non-integer di {row['di']!r} for {row['item_id']!r}") from None
        if kind == "post":
            post_di[row["item_id"]] = di
        elif kind == "comment":
            comment_di[row["item_id"]] = di
        else:
            raise SchemaError(f"scores: unknown kind {kind!r}")
    return post_di, comment_di


# labels ---------------------------------------------------------------------

def write_labels(path, labels: Iterable[ClassifiedComment], comment_posts: Mapping[str, str]):
    rows = [{
        "comment_id": lab.comment_id,
        "post_id": comment_posts.get(lab.comment_id, ""),
        "label": lab.label.value,
        "matched_families": ";".join(f for f in FAMILIES if f in lab.matched_families),
    } for lab in labels]
    return write_csv(path, LABEL_FIELDS, rows)


def read_labels(path) -> tuple[dict[str, str], dict[str, str]]:
    """Return (comment_id -> label, comment_id -> post_id)."""
    labels: dict[str, str] = {}
    posts: dict[str, str] = {}
    for row in read_csv(path, ("comment_id", "post_id", "label")):
        labels[row["comment_id"]] = row["label"].strip()
        posts[row["comment_id"]] = row["post_id"].strip()
    return labels, posts


def read_values(path) -> np.ndarray:
    """Read a single numeric column (``value`` or ``delta``, else the last column).

    A ``regulatable`` column, as written by ``event-align``, restricts the
    read to flagged rows.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if not header:
            raise SchemaError(f"{path.name}: empty file")
        col = next((c for c in ("value", "delta", "delta_mean") if c in header), header[-1])
        out = []
        flagged = "regulatable" in header
        for row in reader:
            if flagged and (row.get("regulatable") or "").strip() not in ("1", "true", "True"):
                continue
            text = (row.get(col) or "").strip()
            if not text:
                continue
            try:
                out.append(float(text))
            except ValueError:
                raise SchemaError(f"{path.name}: non-numeric value {text!r} in column {col!r}") from None
    return np.asarray(out, dtype=float)

"""Post/comment archive parsing, integrity checks and thread assembly.

Archives arrive as two files, one for posts and one for comments, either as
CSV with a header row or as line-delimited JSON (one object per line). Every
input row either becomes a record or produces a :class:`Diagnostic` carrying
its line number; nothing is dropped silently.
"""

from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator, Union

from .errors import ArchiveError, SchemaError

POST_FIELDS = ("post_id", "author_id", "created_at", "title", "body")
COMMENT_FIELDS = ("comment_id", "post_id", "parent_id", "author_id", "created_at", "body")

Source = Union[str, Path, IO[str], Iterable[dict]]

_FRACTION = re.compile(r"\.(\d+)(?=[+-]\d{2}:?\d{2}$)")
_TZ_SUFFIX = re.compile(r"(Z|[+-]\d{2}:?\d{2})$", re.IGNORECASE)


@dataclass(frozen=True)
class PostRecord:
    post_id: str
    author_id: str
    created_at: datetime
    title: str = ""
    body: str = ""

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}"


@dataclass(frozen=True)
class CommentRecord:
    comment_id: str
    post_id: str
    parent_id: str
    author_id: str
    created_at: datetime
    body: str = ""


@dataclass(frozen=True)
class Thread:
    post: PostRecord
    comments: tuple[CommentRecord, ...]


@dataclass(frozen=True)
class ArchiveStats:
    n_posts: int
    n_comments: int
    n_agents: int

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.n_posts, self.n_comments, self.n_agents)


@dataclass(frozen=True)
class Diagnostic:
    source: str  # "posts" | "comments"
    line: int
    severity: str  # "error" rows are excluded, "warning" rows are kept or quarantined
    code: str
    message: str

    def as_dict(self) -> dict:
        return {
            "source": self.source,
            "line": self.line,
            "severity": self.severity,
            "code": self.code,
            "message": self.message,
        }


@dataclass
class ParsedArchive:
    """Result of :func:`parse_archive`.

    Unpacks as ``posts, comments = parse_archive(...)``; quarantined orphan
    comments and all diagnostics are kept on the object.
    """

    posts: list[PostRecord]
    comments: list[CommentRecord]
    quarantined: list[CommentRecord] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def __iter__(self) -> Iterator:
        return iter((self.posts, self.comments))

    @property
    def errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.severity == "error"]


# ---------------------------------------------------------------------------
# timestamps
# ---------------------------------------------------------------------------

def parse_timestamp(value: str) -> datetime:
    """Parse an ISO-8601 timestamp that carries a UTC offset.

    Naive timestamps are rejected. The result is converted to UTC and
    truncated to whole seconds.
    """
    text = (value or "").strip()
    if not text:
        raise ValueError("empty timestamp")
    if not _TZ_SUFFIX.search(text):
        raise ValueError(f"timestamp {value!r} has no UTC offset")
    if text[-1] in "zZ":
        text = text[:-1] + "+00:00"
    # fromisoformat before 3.11 only takes 3 or 6 fractional digits
    text = _FRACTION.sub(lambda m: "." + (m.group(1) + "000000")[:6], text)
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise ValueError(f"malformed timestamp {value!r}") from exc
    if ts.tzinfo is None or ts.utcoffset() is None:
        raise ValueError(f"timestamp {value!r} has no UTC offset")
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# ---------------------------------------------------------------------------
# reading
# ---------------------------------------------------------------------------

def _iter_rows(source: Source, name: str) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield (line_number, row, error) triples from a CSV or JSONL source."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        with path.open("r", encoding="utf-8", newline="") as fh:
            jsonl = path.suffix.lower() in (".jsonl", ".ndjson", ".json")
            yield from _iter_handle(fh, jsonl=jsonl)
        return
    if hasattr(source, "read"):
        text = source.read()
        stripped = text.lstrip()
        yield from _iter_handle(io.StringIO(text), jsonl=stripped.startswith("{"))
        return
    for i, row in enumerate(source, start=1):
        yield i, dict(row), None


def _iter_handle(fh: IO[str], jsonl: bool) -> Iterator[tuple[int, dict | None, str | None]]:
    if jsonl:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                yield lineno, None, f"invalid JSON: {exc.msg}"
                continue
            if not isinstance(row, dict):
                yield lineno, None, "record is not an object"
                continue
            yield lineno, row, None
        return
    reader = csv.DictReader(fh)
    # header occupies line 1; report physical line numbers of data rows
    for row in reader:
        yield reader.line_num, row, None


def _field(row: dict, key: str) -> str:
    value = row.get(key)
    if value is None:
        return ""
    return str(value)


def _check_header(rows: list[tuple[int, dict | None, str | None]], required: Iterable[str], name: str):
    for _, row, _ in rows:
        if row is None:
            continue
        missing = [k for k in required if k not in row]
        if missing:
            raise SchemaError(f"{name}: missing required column(s) {', '.join(missing)}")
        return


def parse_archive(posts_source: Source, comments_source: Source, strict: bool = False) -> ParsedArchive:
    """Parse posts and comments and validate referential integrity.

    Parameters
    ----------
    posts_source, comments_source
        Paths (``.csv`` or ``.jsonl``), open text handles, or iterables of
        dict rows.
    strict
        Raise :class:`ArchiveError` if any row-level error was found instead
        of returning the diagnostics.

    Returns
    -------
    ParsedArchive
        Posts and threaded comments, plus quarantined orphan comments and
        positional diagnostics.
    """
    diagnostics: list[Diagnostic] = []

    post_rows = list(_iter_rows(posts_source, "posts"))
    comment_rows = list(_iter_rows(comments_source, "comments"))
    _check_header(post_rows, ("post_id", "author_id", "created_at"), "posts")
    _check_header(comment_rows, ("comment_id", "post_id", "author_id", "created_at"), "comments")

    posts: list[PostRecord] = []
    post_line: dict[str, int] = {}
    for line, row, err in post_rows:
        if err is not None:
            diagnostics.append(Diagnostic("posts", line, "error", "malformed_row", err))
            continue
        pid = _field(row, "post_id").strip()
        if not pid:
            diagnostics.append(Diagnostic("posts", line, "error", "missing_id", "empty post_id"))
            continue
        try:
            ts = parse_timestamp(_field(row, "created_at"))
        except ValueError as exc:
            diagnostics.append(Diagnostic("posts", line, "error", "bad_timestamp", str(exc)))
            continue
        if pid in post_line:
            diagnostics.append(Diagnostic(
                "posts", line, "error", "duplicate_id",
                f"post_id {pid!r} on line {line} duplicates line {post_line[pid]}",
            ))
            continue
        post_line[pid] = line
        posts.append(PostRecord(
            post_id=pid,
            author_id=_field(row, "author_id").strip(),
            created_at=ts,
            title=_field(row, "title"),
            body=_field(row, "body"),
        ))

    comments: list[CommentRecord] = []
    quarantined: list[CommentRecord] = []
    comment_line: dict[str, int] = {}
    for line, row, err in comment_rows:
        if err is not None:
            diagnostics.append(Diagnostic("comments", line, "error", "malformed_row", err))
            continue
        cid = _field(row, "comment_id").strip()
        if not cid:
            diagnostics.append(Diagnostic("comments", line, "error", "missing_id", "empty comment_id"))
            continue
        try:
            ts = parse_timestamp(_field(row, "created_at"))
        except ValueError as exc:
            diagnostics.append(Diagnostic("comments", line, "error", "bad_timestamp", str(exc)))
            continue
        if cid in comment_line:
            diagnostics.append(Diagnostic(
                "comments", line, "error", "duplicate_id",
                f"comment_id {cid!r} on line {line} duplicates line {comment_line[cid]}",
            ))
            continue
        comment_line[cid] = line
        rec = CommentRecord(
            comment_id=cid,
            post_id=_field(row, "post_id").strip(),
            parent_id=_field(row, "parent_id").strip(),
            author_id=_field(row, "author_id").strip(),
            created_at=ts,
            body=_field(row, "body"),
        )
        if rec.post_id not in post_line:
            diagnostics.append(Diagnostic(
                "comments", line, "warning", "orphan_comment",
                f"comment {cid!r} references unknown post {rec.post_id!r}; quarantined",
            ))
            quarantined.append(rec)
        else:
            comments.append(rec)

    by_id = {c.comment_id: c for c in comments}
    for c in comments:
        if not c.parent_id:
            continue
        parent = by_id.get(c.parent_id)
        if parent is None or parent.post_id != c.post_id:
            diagnostics.append(Diagnostic(
                "comments", comment_line[c.comment_id], "warning", "orphan_parent",
                f"comment {c.comment_id!r} has parent {c.parent_id!r} not found in post "
                f"{c.post_id!r}; treated as top-level",
            ))

    result = ParsedArchive(posts, comments, quarantined, diagnostics)
    if strict and result.errors:
        first = result.errors[0]
        raise ArchiveError(
            f"{len(result.errors)} row error(s); first: {first.source} line {first.line}: {first.message}",
            result.errors,
        )
    return result


# ---------------------------------------------------------------------------
# threads and summaries
# ---------------------------------------------------------------------------

def comment_sort_key(c: CommentRecord) -> tuple:
    return (c.created_at, c.comment_id)


def build_threads(posts: Iterable[PostRecord], comments: Iterable[CommentRecord]) -> list[Thread]:
    """Group comments under their post, time-ordered with ties broken by id.

    Returns one thread per post, ordered by post time and then post id.
    Comments whose post is absent are ignored here (parsing quarantines them).
    """
    grouped: dict[str, list[CommentRecord]] = defaultdict(list)
    for c in comments:
        grouped[c.post_id].append(c)
    threads = []
    for p in sorted(posts, key=lambda p: (p.created_at, p.post_id)):
        threads.append(Thread(p, tuple(sorted(grouped.get(p.post_id, ()), key=comment_sort_key))))
    return threads


def archive_summary(posts: Iterable[PostRecord], comments: Iterable[CommentRecord]) -> ArchiveStats:
    posts = list(posts)
    comments = list(comments)
    agents = {p.author_id for p in posts} | {c.author_id for c in comments}
    return ArchiveStats(len(posts), len(comments), len(agents))


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------

def post_to_row(p: PostRecord) -> dict:
    return {
        "post_id": p.post_id,
        "author_id": p.author_id,
        "created_at": format_timestamp(p.created_at),
        "title": p.title,
        "body": p.body,
    }


def comment_to_row(c: CommentRecord) -> dict:
    return {
        "comment_id": c.comment_id,
        "post_id": c.post_id,
        "parent_id": c.parent_id,
        "author_id": c.author_id,
        "created_at": format_timestamp(c.created_at),
        "body": c.body,
    }


def _write_csv(path: Path, fields: tuple[str, ...], rows: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_posts(path: Path | str, posts: Iterable[PostRecord]) -> None:
    """Write posts in canonical form: CSV, UTC ``Z`` timestamps, sorted by time then id."""
    ordered = sorted(posts, key=lambda p: (p.created_at, p.post_id))
    _write_csv(Path(path), POST_FIELDS, (post_to_row(p) for p in ordered))


def write_comments(path: Path | str, comments: Iterable[CommentRecord]) -> None:
    ordered = sorted(comments, key=lambda c: (c.post_id, c.created_at, c.comment_id))
    _write_csv(Path(path), COMMENT_FIELDS, (comment_to_row(c) for c in ordered))

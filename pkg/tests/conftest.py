from datetime import datetime, timedelta, timezone

import pytest

from threadgauge.archive import CommentRecord, PostRecord

T0 = datetime(2026, 1, 1, tzinfo=timezone.utc)


def at(hours: float) -> datetime:
    return T0 + timedelta(hours=hours)


def post(pid, author="a", hours=0.0, title="", body=""):
    return PostRecord(pid, author, at(hours), title, body)


def comment(cid, pid, author="b", hours=1.0, body="", parent=""):
    return CommentRecord(cid, pid, parent, author, at(hours), body)


@pytest.fixture
def tiny_rows():
    posts = [
        {"post_id": "p1", "author_id": "a", "created_at": "2026-01-01T00:00:00Z", "title": "t1", "body": "b1"},
        {"post_id": "p2", "author_id": "b", "created_at": "2026-01-01T01:00:00+02:00", "title": "", "body": "b2"},
    ]
    comments = [
        {"comment_id": "c1", "post_id": "p1", "parent_id": "", "author_id": "c",
         "created_at": "2026-01-01T02:00:00Z", "body": "hello"},
    ]
    return posts, comments

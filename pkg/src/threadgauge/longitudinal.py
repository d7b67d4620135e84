"""Within-thread and within-agent analyses around corrective replies.

Three designs live here:

* event alignment: per thread, compare comment DI in a symmetric window
  before and after the first corrective reply;
* within-agent fixed effects: mark an agent's next M contributions after it
  is targeted by a corrective reply as treated and regress DI on that flag
  after demeaning within agent;
* a coarse stratified comparison of early-corrected and other threads on
  downstream DI escalation.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Mapping, Sequence

import numpy as np

from .archive import CommentRecord, PostRecord, Thread
from .classifier import InteractionType
from .errors import DegenerateDataError
from .inference import cluster_robust_cov


def _is_corrective(label) -> bool:
    if isinstance(label, InteractionType):
        return label is InteractionType.CORRECTIVE
    if isinstance(label, bool):
        return label
    return str(label) == InteractionType.CORRECTIVE.value


# ---------------------------------------------------------------------------
# event alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventWindow:
    post_id: str
    t0: datetime
    before: tuple[tuple[str, int], ...]
    after: tuple[tuple[str, int], ...]
    window_hours: float = 12.0

    @property
    def mean_before(self) -> float:
        return float(np.mean([d for _, d in self.before])) if self.before else math.nan

    @property
    def mean_after(self) -> float:
        return float(np.mean([d for _, d in self.after])) if self.after else math.nan


@dataclass(frozen=True)
class RegulatableThread:
    window: EventWindow
    delta_mean: float
    fixed_n_delta: float | None = None

    @property
    def post_id(self) -> str:
        return self.window.post_id


@dataclass
class EventAlignment:
    """Outcome of :func:`event_aligned_deltas`.

    ``usable`` holds every thread with comments on both sides of t0 (with a
    ``regulatable`` flag); ``regulatable`` the subset with max DI before
    t0 above zero. ``census`` counts exclusions by reason.
    """

    regulatable: list[RegulatableThread]
    usable: list[tuple[RegulatableThread, bool]]
    census: dict[str, int]

    def __iter__(self):
        return iter((self.regulatable, self.census))


def event_window(
    thread: Thread,
    labels: Mapping[str, object],
    comment_di: Mapping[str, int],
    window_hours: float = 12.0,
) -> EventWindow | None:
    """Window around the thread's first corrective comment, or None if it has none.

    Before is ``[t0 - w, t0)``, after is ``(t0, t0 + w]``; anything stamped
    exactly t0, including every corrective comment tied at t0, is on neither side.
    """
    corrective_times = [
        c.created_at for c in thread.comments if _is_corrective(labels.get(c.comment_id))
    ]
    if not corrective_times:
        return None
    t0 = min(corrective_times)
    w = timedelta(hours=window_hours)
    before = tuple(
        (c.comment_id, int(comment_di[c.comment_id]))
        for c in thread.comments if t0 - w <= c.created_at < t0
    )
    after = tuple(
        (c.comment_id, int(comment_di[c.comment_id]))
        for c in thread.comments if t0 < c.created_at <= t0 + w
    )
    return EventWindow(thread.post.post_id, t0, before, after, window_hours)


def event_aligned_deltas(
    threads: Iterable[Thread],
    labels: Mapping[str, object],
    comment_di: Mapping[str, int],
    window_hours: float = 12.0,
) -> EventAlignment:
    census = {
        "threads": 0,
        "no_corrective": 0,
        "with_corrective": 0,
        "no_before": 0,
        "no_after": 0,
        "no_before_no_after": 0,
        "zero_di_before": 0,
        "usable": 0,
        "regulatable": 0,
    }
    regulatable: list[RegulatableThread] = []
    usable: list[tuple[RegulatableThread, bool]] = []
    for thread in threads:
        census["threads"] += 1
        win = event_window(thread, labels, comment_di, window_hours)
        if win is None:
            census["no_corrective"] += 1
            continue
        census["with_corrective"] += 1
        if not win.before and not win.after:
            census["no_before_no_after"] += 1
            continue
        if not win.before:
            census["no_before"] += 1
            continue
        if not win.after:
            census["no_after"] += 1
            continue
        census["usable"] += 1
        rt = RegulatableThread(win, win.mean_after - win.mean_before)
        ok = max(d for _, d in win.before) > 0
        usable.append((rt, ok))
        if ok:
            census["regulatable"] += 1
            regulatable.append(rt)
        else:
            census["zero_di_before"] += 1
    return EventAlignment(regulatable, usable, census)


def fixed_n_comparison(
    window_threads: Sequence[RegulatableThread], n: int = 5
) -> tuple[list[RegulatableThread], float]:
    """Mean DI of the first ``n`` after-comments minus the last ``n`` before-comments.

    Uses whatever is available when a side has fewer than ``n`` comments.
    Returns the updated threads and the median of the fixed-N deltas.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for rt in window_threads:
        before = [d for _, d in rt.window.before][-n:]
        after = [d for _, d in rt.window.after][:n]
        delta = float(np.mean(after) - np.mean(before))
        out.append(RegulatableThread(rt.window, rt.delta_mean, delta))
    median = float(np.median([rt.fixed_n_delta for rt in out])) if out else math.nan
    return out, median


# ---------------------------------------------------------------------------
# within-agent fixed effects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeEvent:
    event_time: datetime
    target_agent: str
    source_comment_id: str
    source_agent: str = ""
    target_item_id: str = ""
    self_correction: bool = False
    fallback: bool = False


@dataclass(frozen=True)
class FePanelRow:
    agent_id: str
    item_id: str
    kind: str
    time: datetime
    y: float
    treated: int


@dataclass(frozen=True)
class FeFit:
    beta: float
    se: float
    n_obs: int
    n_agents: int
    n_agents_varying: int
    n_treated: int


def resolve_fe_events(
    posts: Iterable[PostRecord],
    comments: Iterable[CommentRecord],
    labels: Mapping[str, object],
) -> tuple[list[FeEvent], list[str]]:
    """One event per corrective comment, targeting the parent comment's author
    if ``parent_id`` is set and resolvable within the post, else the post author.

    Returns the events (time-ordered) and diagnostics for parents that could
    not be resolved.
    """
    post_by_id = {p.post_id: p for p in posts}
    comments = list(comments)
    comment_by_id = {c.comment_id: c for c in comments}
    events = []
    diagnostics = []
    for c in comments:
        if not _is_corrective(labels.get(c.comment_id)):
            continue
        post = post_by_id.get(c.post_id)
        if post is None:
            diagnostics.append(f"corrective comment {c.comment_id} has no post; skipped")
            continue
        fallback = False
        target_agent, target_item = post.author_id, post.post_id
        if c.parent_id:
            parent = comment_by_id.get(c.parent_id)
            if parent is not None and parent.post_id == c.post_id:
                target_agent, target_item = parent.author_id, parent.comment_id
            else:
                fallback = True
                diagnostics.append(
                    f"corrective comment {c.comment_id}: parent {c.parent_id} unresolved; "
                    f"targeting post author"
                )
        events.append(FeEvent(
            event_time=c.created_at,
            target_agent=target_agent,
            source_comment_id=c.comment_id,
            source_agent=c.author_id,
            target_item_id=target_item,
            self_correction=target_agent == c.author_id,
            fallback=fallback,
        ))
    events.sort(key=lambda e: (e.event_time, e.source_comment_id))
    return events, diagnostics


def build_fe_panel(
    events: Iterable[FeEvent],
    posts: Iterable[PostRecord],
    comments: Iterable[CommentRecord],
    m: int,
    post_di: Mapping[str, int],
    comment_di: Mapping[str, int],
    outcome: str = "di",
    exclude_self: bool = False,
) -> list[FePanelRow]:
    """Contribution panel for agents with at least one event.

    For each event the ``m`` earliest contributions (posts and comments) by
    the target strictly after the event time are treated; overlapping
    windows union. ``outcome`` is ``"di"`` or ``"positive"`` (DI > 0).
    """
    if outcome not in ("di", "positive"):
        raise ValueError(f"unknown outcome {outcome!r}")
    by_agent: dict[str, list[tuple]] = defaultdict(list)
    for p in posts:
        by_agent[p.author_id].append((p.created_at, "post", p.post_id, post_di[p.post_id]))
    for c in comments:
        by_agent[c.author_id].append((c.created_at, "comment", c.comment_id, comment_di[c.comment_id]))
    event_times: dict[str, list[datetime]] = defaultdict(list)
    for e in events:
        if exclude_self and e.self_correction:
            continue
        event_times[e.target_agent].append(e.event_time)

    rows = []
    for agent in sorted(event_times):
        contribs = sorted(by_agent.get(agent, ()), key=lambda t: (t[0], t[1], t[2]))
        times = [t[0] for t in contribs]
        treated = np.zeros(len(contribs), dtype=int)
        for et in event_times[agent]:
            start = bisect.bisect_right(times, et)  # strictly after the event
            treated[start:start + m] = 1
        for (ts, kind, item, di), tr in zip(contribs, treated):
            y = float(di) if outcome == "di" else float(di > 0)
            rows.append(FePanelRow(agent, item, kind, ts, y, int(tr)))
    return rows


def fit_within_fe(panel: Sequence[FePanelRow], small_sample: bool = True) -> FeFit:
    """Within-agent OLS of y on the treated flag with agent-clustered CR1 SE.

    With fewer than two agents the slope is still returned, with ``se=nan``.
    """
    if not panel:
        raise DegenerateDataError("empty fixed-effects panel")
    agents = np.array([r.agent_id for r in panel])
    y = np.array([r.y for r in panel], dtype=float)
    d = np.array([r.treated for r in panel], dtype=float)
    _, codes = np.unique(agents, return_inverse=True)
    G = int(codes.max()) + 1
    cnt = np.bincount(codes, minlength=G).astype(float)
    y_dm = y - (np.bincount(codes, weights=y, minlength=G) / cnt)[codes]
    d_dm = d - (np.bincount(codes, weights=d, minlength=G) / cnt)[codes]
    sxx = float(np.dot(d_dm, d_dm))
    varying = np.bincount(codes, weights=np.abs(d_dm) > 1e-12, minlength=G) > 0
    if sxx <= 1e-12 or not varying.any():
        raise DegenerateDataError("no agent has within-agent variation in treatment")
    beta = float(np.dot(d_dm, y_dm) / sxx)
    resid = y_dm - beta * d_dm
    if G >= 2:
        cov = cluster_robust_cov((d_dm * resid)[:, None], np.array([[1.0 / sxx]]), codes, small_sample)
        se = float(math.sqrt(cov[0, 0]))
    else:
        se = math.nan
    return FeFit(beta, se, len(y), G, int(varying.sum()), int(d.sum()))


# ---------------------------------------------------------------------------
# stratified early-correction comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThreadStratum:
    di_bin: str  # "0" | ">0"
    engagement_tercile: int
    early_max_di_bin: str


@dataclass(frozen=True)
class ThreadSummary:
    post_id: str
    stratum: ThreadStratum
    engagement: int
    early_by_count: bool
    early_by_time: bool
    n_downstream: int
    esc_high: int
    downstream_max: float
    downstream_mean: float


@dataclass
class StrataComparison:
    threads: list[ThreadSummary]
    table: list[dict]
    tercile_edges: tuple[float, float]
    notes: list[str] = field(default_factory=list)


def tercile_of(values: Sequence[float]) -> tuple[np.ndarray, tuple[float, float]]:
    """Assign terciles 1..3 using the 1/3 and 2/3 quantiles; ties go to the lower tercile."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return np.zeros(0, dtype=int), (math.nan, math.nan)
    q1, q2 = np.quantile(v, [1.0 / 3.0, 2.0 / 3.0])
    t = np.where(v <= q1, 1, np.where(v <= q2, 2, 3))
    return t, (float(q1), float(q2))


def stratify_and_compare(
    threads: Iterable[Thread],
    labels: Mapping[str, object],
    comment_di: Mapping[str, int],
    post_di: Mapping[str, int],
    e: int = 5,
    h_hours: float = 6.0,
    esc_threshold: int = 3,
) -> StrataComparison:
    eligible = [t for t in threads if any(c.comment_id in labels for c in t.comments)]
    horizon = timedelta(hours=h_hours)
    engagement = [
        sum(1 for c in t.comments if c.created_at - t.post.created_at <= horizon) for t in eligible
    ]
    terciles, edges = tercile_of(engagement)
    summaries = []
    for t, eng, terc in zip(eligible, engagement, terciles):
        comments = [c for c in t.comments if c.comment_id in labels]
        early = comments[:e]
        downstream = comments[e:]
        early_max = max((comment_di[c.comment_id] for c in early), default=0)
        down_di = [comment_di[c.comment_id] for c in downstream]
        stratum = ThreadStratum(
            "0" if post_di[t.post.post_id] == 0 else ">0",
            int(terc),
            "0" if early_max == 0 else ">0",
        )
        summaries.append(ThreadSummary(
            post_id=t.post.post_id,
            stratum=stratum,
            engagement=int(eng),
            early_by_count=any(_is_corrective(labels.get(c.comment_id)) for c in early),
            early_by_time=any(
                _is_corrective(labels.get(c.comment_id))
                and c.created_at - t.post.created_at <= horizon
                for c in comments
            ),
            n_downstream=len(down_di),
            esc_high=int(bool(down_di) and max(down_di) >= esc_threshold),
            downstream_max=float(max(down_di)) if down_di else math.nan,
            downstream_mean=float(np.mean(down_di)) if down_di else math.nan,
        ))

    def mean_of(vals):
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    table = []
    for di_bin in ("0", ">0"):
        for terc in (1, 2, 3):
            for emax in ("0", ">0"):
                stratum = ThreadStratum(di_bin, terc, emax)
                members = [s for s in summaries if s.stratum == stratum]
                for definition, attr in (("count", "early_by_count"), ("time", "early_by_time")):
                    groups = {
                        "early": [s for s in members if getattr(s, attr)],
                        "not_early": [s for s in members if not getattr(s, attr)],
                    }
                    row = {
                        "di_bin": di_bin,
                        "engagement_tercile": terc,
                        "early_max_di_bin": emax,
                        "early_definition": definition,
                        "n_threads": len(members),
                    }
                    for g, ss in groups.items():
                        row[f"n_{g}"] = len(ss)
                        row[f"n_downstream_zero_{g}"] = sum(s.n_downstream == 0 for s in ss)
                        row[f"esc_high_{g}"] = mean_of([float(s.esc_high) for s in ss])
                        row[f"downstream_max_{g}"] = mean_of([s.downstream_max for s in ss])
                        row[f"downstream_mean_{g}"] = mean_of([s.downstream_mean for s in ss])
                    if groups["early"] and groups["not_early"]:
                        row["esc_high_diff"] = row["esc_high_early"] - row["esc_high_not_early"]
                    else:
                        row["esc_high_diff"] = math.nan
                    table.append(row)
    notes = [f"tercile edges {edges[0]:g}, {edges[1]:g}; ties assigned to the lower tercile"]
    return StrataComparison(summaries, table, edges, notes)

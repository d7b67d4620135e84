"""Seeded synthetic archives with planted effects.

The generator builds an archive in the same file format the ingest path
reads, with known ground truth:

* post DI is zero-inflated (``p_zero`` at 0, otherwise geometric, capped);
* each comment is corrective with probability
  ``logistic(true_alpha + true_beta * z(DI_post) + u_post)``,
  ``u_post ~ N(0, true_sigma_u^2)``, where z standardizes DI over posts
  with at least one comment (sample SD), exactly as the estimators do;
* comment DI is ``min(Poisson(rate), cap)``; the rate is multiplied by
  ``exp(suppression_delta)`` for comments strictly after the thread's first
  corrective reply and by ``exp(agent_suppression_delta)`` for a targeted
  agent's next ``agent_suppression_m`` contributions;
* text is assembled from lexicon-matching phrases and neutral filler so the
  bundled lexicon and rules recover the planted DI and labels exactly.

Post DI never responds to agent suppression: posts drive the corrective
probabilities that define the events, so letting them react would make the
design circular.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy import special, stats

from .archive import CommentRecord, PostRecord, write_comments, write_posts
from .classifier import InteractionType
from .errors import DegenerateDataError
from .rng import substream

BASE_TIME = datetime(2026, 1, 1, tzinfo=timezone.utc)

# one phrase per bundled lexicon pattern; each matches exactly its own pattern
DI_PHRASES = {
    "act_run_this": "run this",
    "act_install": "install",
    "act_click": "click here",
    "act_follow_steps": "follow these steps",
    "act_step_n": "step 1",
    "act_copy_paste": "copy and paste",
    "act_make_sure": "make sure to",
    "sen_sudo": "sudo",
    "sen_curl_sh": "curl get.example | sh",
    "sen_rm_rf": "rm -rf",
    "sen_api_key": "api key",
    "sen_chmod": "chmod 777",
}
LABEL_PHRASES = {
    InteractionType.ADVERSE: "this is garbage",
    InteractionType.CORRECTIVE: "be careful with that",
    InteractionType.AFFIRMATION: "great post",
    InteractionType.NEUTRAL: "",
}
FILLER = (
    "interesting", "the weather", "today", "observed", "pattern", "network",
    "agents", "morning", "noted", "quiet", "signal", "archive", "update",
    "hello", "some thoughts", "a question", "long day", "logs",
)


@dataclass
class SynthConfig:
    n_posts: int = 500
    n_agents: int = 200
    comments_per_post_mean: float = 3.0
    true_alpha: float = -1.5
    true_beta: float = 0.3
    true_sigma_u: float = 0.8
    suppression_delta: float = 0.0
    agent_suppression_delta: float = 0.0
    agent_suppression_m: int = 5
    p_zero: float = 0.816
    geom_p: float = 0.5
    cap: int = 10
    comment_di_rate: float = 1.0
    adverse_weight: float = 0.1
    affirmation_weight: float = 0.3
    neutral_weight: float = 0.6
    reply_prob: float = 0.3
    label_noise: float = 0.0
    mean_gap_hours: float = 1.0
    horizon_days: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.n_posts < 1:
            raise ValueError("n_posts must be >= 1")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if not self.comments_per_post_mean > 0:
            raise ValueError("comments_per_post_mean must be > 0")
        if self.true_sigma_u < 0:
            raise ValueError("true_sigma_u must be >= 0")
        if not 0 <= self.p_zero <= 1:
            raise ValueError("p_zero must be in [0, 1]")
        if not 0 < self.geom_p <= 1:
            raise ValueError("geom_p must be in (0, 1]")
        if self.cap > len(DI_PHRASES):
            raise ValueError(f"cap above {len(DI_PHRASES)} cannot be expressed with the bundled lexicon")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class GroundTruth:
    config: dict
    post_di: dict[str, int]
    post_z: dict[str, float]
    post_u: dict[str, float]
    comment_di: dict[str, int]
    planted_labels: dict[str, str]
    labels: dict[str, str]
    expected_di: dict[str, float]
    agent_treated: dict[str, bool] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def synthesize_text(phrases: list[str], rng: np.random.Generator, lead: str = "") -> str:
    """Interleave phrases with filler, separated so no pattern spans a seam."""
    parts = [lead] if lead else []
    for ph in phrases:
        parts.append(FILLER[int(rng.integers(len(FILLER)))])
        parts.append(ph)
    parts.append(FILLER[int(rng.integers(len(FILLER)))])
    return ". ".join(parts)


def di_phrases(k: int, rng: np.random.Generator, mode: str = "patterns") -> list[str]:
    """Phrases scoring exactly ``k`` under the bundled lexicon in the given count mode."""
    keys = list(DI_PHRASES)
    if k <= 0:
        return []
    if mode == "occurrences":
        return [DI_PHRASES[keys[int(rng.integers(len(keys)))]]] * k
    chosen = rng.choice(len(keys), size=k, replace=False)
    return [DI_PHRASES[keys[i]] for i in sorted(chosen)]


def _capped_poisson_mean(rate: float, cap: int) -> float:
    if rate <= 0:
        return 0.0
    j = np.arange(cap)
    return float(np.sum(j * stats.poisson.pmf(j, rate)) + cap * stats.poisson.sf(cap - 1, rate))


def _expected_post_di(cfg: SynthConfig) -> float:
    k = np.arange(1, cfg.cap)
    pmf = cfg.geom_p * (1 - cfg.geom_p) ** (k - 1)
    tail = (1 - cfg.geom_p) ** (cfg.cap - 1)
    return (1 - cfg.p_zero) * float(np.sum(k * pmf) + cfg.cap * tail)


def generate_archive(config: SynthConfig):
    """Return ``(posts, comments, ground_truth)`` for ``config``."""
    cfg = config
    rs = substream(cfg.seed, "synth/structure")
    rd = substream(cfg.seed, "synth/post_di")
    rl = substream(cfg.seed, "synth/labels")
    rc = substream(cfg.seed, "synth/comment_di")
    rt = substream(cfg.seed, "synth/text")

    wa = len(str(cfg.n_agents - 1))
    agents = [f"agent{i:0{wa}d}" for i in range(cfg.n_agents)]
    wp = len(str(cfg.n_posts - 1))
    post_ids = [f"p{i:0{wp}d}" for i in range(cfg.n_posts)]
    horizon = cfg.horizon_days * 86400.0

    post_author = rs.integers(cfg.n_agents, size=cfg.n_posts)
    post_time = np.floor(rs.random(cfg.n_posts) * horizon).astype(np.int64)
    n_comments = rs.poisson(cfg.comments_per_post_mean, size=cfg.n_posts)
    total = int(n_comments.sum())
    wc = len(str(max(total - 1, 0)))

    # comment structure, thread by thread
    c_post, c_time, c_author, c_parent, c_ids = [], [], [], [], []
    idx = 0
    for j in range(cfg.n_posts):
        gaps = rs.exponential(cfg.mean_gap_hours * 3600.0, size=n_comments[j])
        times = post_time[j] + np.maximum(np.round(np.cumsum(gaps)), 1).astype(np.int64)
        times = np.maximum.accumulate(times)
        first = idx
        for i in range(n_comments[j]):
            cid = f"c{idx:0{wc}d}"
            parent = ""
            if i > 0 and rs.random() < cfg.reply_prob:
                parent = c_ids[first + int(rs.integers(i))]
            c_ids.append(cid)
            c_post.append(j)
            c_time.append(int(times[i]))
            c_author.append(int(rs.integers(cfg.n_agents)))
            c_parent.append(parent)
            idx += 1
    c_post = np.array(c_post, dtype=np.intp)
    c_time = np.array(c_time, dtype=np.int64)

    # post DI and standardization over commented posts
    positive = rd.random(cfg.n_posts) >= cfg.p_zero
    post_di = np.where(positive, np.minimum(rd.geometric(cfg.geom_p, size=cfg.n_posts), cfg.cap), 0)
    has_comments = n_comments > 0
    basis = post_di[has_comments].astype(float)
    if len(basis) < 2 or not basis.std(ddof=1) > 0:
        raise DegenerateDataError("synthetic config yields zero DI variance among commented posts")
    z = (post_di - basis.mean()) / basis.std(ddof=1)

    # labels
    u = rl.normal(0.0, cfg.true_sigma_u, size=cfg.n_posts) if cfg.true_sigma_u > 0 else np.zeros(cfg.n_posts)
    prob = special.expit(cfg.true_alpha + cfg.true_beta * z[c_post] + u[c_post])
    is_corr = rl.random(total) < prob
    others = np.array([cfg.adverse_weight, cfg.affirmation_weight, cfg.neutral_weight], dtype=float)
    others = others / others.sum()
    other_draw = rl.choice(3, size=total, p=others)
    other_types = (InteractionType.ADVERSE, InteractionType.AFFIRMATION, InteractionType.NEUTRAL)
    planted = [
        InteractionType.CORRECTIVE if is_corr[i] else other_types[other_draw[i]] for i in range(total)
    ]
    labels = list(planted)
    if cfg.label_noise > 0:
        flip = rl.random(total) < cfg.label_noise
        repl = rl.integers(4, size=total)
        all_types = list(InteractionType)
        labels = [all_types[repl[i]] if flip[i] else planted[i] for i in range(total)]

    # first corrective time per thread (thread-level suppression)
    first_corr = np.full(cfg.n_posts, np.iinfo(np.int64).max, dtype=np.int64)
    for i in range(total):
        if labels[i] is InteractionType.CORRECTIVE:
            first_corr[c_post[i]] = min(first_corr[c_post[i]], c_time[i])

    # agent-level treated contributions, using the same targeting rule as the panel
    treated = _agent_treated(cfg, post_author, post_time, c_post, c_time, c_author, c_parent, c_ids, labels)

    rate = np.full(total, cfg.comment_di_rate)
    rate = rate * np.where(c_time > first_corr[c_post], math.exp(cfg.suppression_delta), 1.0)
    rate = rate * np.where(treated, math.exp(cfg.agent_suppression_delta), 1.0)
    comment_di = np.minimum(rc.poisson(rate), cfg.cap)

    # text
    posts = []
    for j in range(cfg.n_posts):
        body = synthesize_text(di_phrases(int(post_di[j]), rt), rt)
        posts.append(PostRecord(
            post_id=post_ids[j],
            author_id=agents[post_author[j]],
            created_at=BASE_TIME + timedelta(seconds=int(post_time[j])),
            title=f"{FILLER[int(rt.integers(len(FILLER)))]} {j}",
            body=body,
        ))
    comments = []
    for i in range(total):
        body = synthesize_text(di_phrases(int(comment_di[i]), rt), rt, lead=LABEL_PHRASES[labels[i]])
        comments.append(CommentRecord(
            comment_id=c_ids[i],
            post_id=post_ids[c_post[i]],
            parent_id=c_parent[i],
            author_id=agents[c_author[i]],
            created_at=BASE_TIME + timedelta(seconds=int(c_time[i])),
            body=body,
        ))

    exp_post = _expected_post_di(cfg)
    expected = {pid: exp_post for pid in post_ids}
    rate_means = {}
    for i in range(total):
        r = float(rate[i])
        if r not in rate_means:
            rate_means[r] = _capped_poisson_mean(r, cfg.cap)
        expected[c_ids[i]] = rate_means[r]

    truth = GroundTruth(
        config=asdict(cfg),
        post_di={post_ids[j]: int(post_di[j]) for j in range(cfg.n_posts)},
        post_z={post_ids[j]: float(z[j]) for j in range(cfg.n_posts)},
        post_u={post_ids[j]: float(u[j]) for j in range(cfg.n_posts)},
        comment_di={c_ids[i]: int(comment_di[i]) for i in range(total)},
        planted_labels={c_ids[i]: planted[i].value for i in range(total)},
        labels={c_ids[i]: labels[i].value for i in range(total)},
        expected_di=expected,
        agent_treated={c_ids[i]: bool(treated[i]) for i in range(total)},
    )
    return posts, comments, truth


def _agent_treated(cfg, post_author, post_time, c_post, c_time, c_author, c_parent, c_ids, labels):
    """Which comments fall in a targeted agent's next-M window after a corrective event."""
    total = len(c_ids)
    treated = np.zeros(total, dtype=bool)
    if cfg.agent_suppression_delta == 0.0 or total == 0:
        return treated
    pos = {cid: i for i, cid in enumerate(c_ids)}
    contribs: dict[int, list[tuple[int, int, int]]] = {}
    for j in range(len(post_author)):
        contribs.setdefault(int(post_author[j]), []).append((int(post_time[j]), 1, -1 - j))
    for i in range(total):
        contribs.setdefault(int(c_author[i]), []).append((int(c_time[i]), 0, i))
    for v in contribs.values():
        v.sort()
    for i in range(total):
        if labels[i] is not InteractionType.CORRECTIVE:
            continue
        target = int(post_author[c_post[i]])
        if c_parent[i]:
            target = int(c_author[pos[c_parent[i]]])
        seq = contribs[target]
        k = 0
        for t, _, item in seq:
            if t > c_time[i]:
                if item >= 0:
                    treated[item] = True
                k += 1
                if k >= cfg.agent_suppression_m:
                    break
    return treated


def write_archive(out_dir, posts, comments, truth: GroundTruth | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "posts.csv", out / "comments.csv"]
    write_posts(paths[0], posts)
    write_comments(paths[1], comments)
    if truth is not None:
        paths.append(out / "ground_truth.json")
        paths[2].write_text(truth.to_json() + "\n", encoding="utf-8")
    return paths

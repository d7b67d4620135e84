"""``threadgauge`` command-line interface.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Failures print one JSON object on stderr and exit nonzero:

====  =====================================
2     usage error (unknown flag, bad value)
3     input file missing
4     schema / parse error in an input
5     data cannot support the analysis
====  =====================================
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, pipeline
from .archive import (
    archive_summary,
    build_threads,
    parse_archive,
    write_comments,
    write_posts,
)
from .classifier import classify_all, demo_rules, load_rules
from .errors import SchemaError, ThreadgaugeError
from .lexicon import COUNT_MODES, demo_lexicon, load_lexicon, positive_share, score_comments, score_posts
from .resampling import bootstrap_percentile
from .rng import resolve_jobs
from .synth import SynthConfig, generate_archive, write_archive
from .tables import (
    read_labels,
    read_scores,
    read_values,
    sha256_file,
    write_json,
    write_labels,
    write_scores,
)

log = logging.getLogger("threadgauge")

# flags that never change results; left out of the manifest so replays compare equal
_NON_RESULT_FLAGS = {"jobs", "out", "func", "verbose"}
_PATH_FLAGS = ("posts", "comments", "lexicon", "rules", "scores", "labels", "values", "config")


class UsageError(ThreadgaugeError):
    exit_code = 2
    kind = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _m_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("M values must be positive integers")
    return values


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _existing(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(path)
    return p


def _load_archive(args):
    parsed = parse_archive(_existing(args.posts), _existing(args.comments))
    for d in parsed.diagnostics:
        log.info("%s line %d: %s (%s)", d.source, d.line, d.message, d.severity)
    return parsed


def _lexicon(args):
    if getattr(args, "lexicon", None):
        return load_lexicon(_existing(args.lexicon), cap=args.cap, count_mode=args.count_mode)
    return demo_lexicon(cap=args.cap, count_mode=args.count_mode)


def _rules(args):
    if getattr(args, "rules", None):
        return load_rules(_existing(args.rules))
    return demo_rules()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(args, out: Path) -> Path:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_RESULT_FLAGS}
    inputs = {}
    for key in _PATH_FLAGS:
        value = getattr(args, key, None)
        if value:
            inputs[key] = {"path": str(value), "sha256": sha256_file(value)}
    outputs = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": args.command,
        "flags": flags,
        "inputs": inputs,
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "outputs": outputs,
    }
    return write_json(out / "manifest.json", manifest)


def _score_and_label(args, parsed):
    lex = _lexicon(args)
    rules = _rules(args)
    post_scores = score_posts(parsed.posts, lex)
    comment_scores = score_comments(parsed.comments, lex)
    labels, freq = classify_all(parsed.comments, rules)
    return lex, post_scores, comment_scores, labels, freq


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args):
    parsed = _load_archive(args)
    out = _out(args)
    write_posts(out / "posts.csv", parsed.posts)
    write_comments(out / "comments.csv", parsed.comments)
    write_comments(out / "quarantine.csv", parsed.quarantined)
    stats = archive_summary(parsed.posts, parsed.comments)
    write_json(out / "diagnostics.json", {
        "stats": {"n_posts": stats.n_posts, "n_comments": stats.n_comments, "n_agents": stats.n_agents},
        "n_quarantined": len(parsed.quarantined),
        "diagnostics": [d.as_dict() for d in parsed.diagnostics],
    })
    return out


def cmd_score(args):
    parsed = _load_archive(args)
    lex = _lexicon(args)
    out = _out(args)
    ps = score_posts(parsed.posts, lex)
    cs = score_comments(parsed.comments, lex)
    write_scores(out / "scores.csv", ps, cs)
    n_action, n_sensitive = lex.category_counts()
    write_json(out / "score_summary.json", {
        "n_action_patterns": n_action,
        "n_sensitive_patterns": n_sensitive,
        "cap": lex.cap,
        "count_mode": lex.count_mode,
        "post_di_positive_share": positive_share(ps),
        "comment_di_positive_share": positive_share(cs),
    })
    return out


def cmd_classify(args):
    parsed = _load_archive(args)
    out = _out(args)
    labels, freq = classify_all(parsed.comments, _rules(args))
    write_labels(out / "labels.csv", labels, {c.comment_id: c.post_id for c in parsed.comments})
    write_json(out / "label_frequencies.json", freq)
    return out


def _sample_from_files(args):
    post_di, _ = read_scores(_existing(args.scores))
    labels, comment_posts = read_labels(_existing(args.labels))
    return pipeline.regression_sample(labels, comment_posts, post_di, args.basis)


def cmd_coupling(args):
    sample = _sample_from_files(args)
    out = _out(args)
    models = pipeline.MODELS if args.model == "all" else (args.model,)
    pipeline.run_coupling(sample, out, args.bins, models, args.alpha, args.bin_level)
    return out


def cmd_permtest(args):
    sample = _sample_from_files(args)
    out = _out(args)
    pipeline.run_permtest(sample, out, args.perms, args.seed, args.bins, args.bin_level, args.jobs)
    return out


def cmd_bootstrap(args):
    values = read_values(_existing(args.values))
    out = _out(args)
    b = bootstrap_percentile(values, args.estimand, args.resamples, args.alpha, args.seed, args.jobs)
    write_json(out / "bootstrap.json", {
        "estimand": b.estimand, "point": b.point, "ci_lo": b.ci_lo, "ci_hi": b.ci_hi,
        "n_resamples": b.n_resamples, "alpha": b.alpha, "n_values": int(len(values)),
    })
    return out


def _archive_scores_labels(args):
    parsed = _load_archive(args)
    post_di, comment_di = read_scores(_existing(args.scores))
    labels, _ = read_labels(_existing(args.labels))
    return parsed, post_di, comment_di, labels


def cmd_event_align(args):
    parsed, _, comment_di, labels = _archive_scores_labels(args)
    out = _out(args)
    threads = build_threads(parsed.posts, parsed.comments)
    pipeline.run_event_align(threads, labels, comment_di, out, args.window_hours, args.fixed_n,
                             args.resamples, args.alpha, args.seed, args.jobs)
    return out


def cmd_fe(args):
    parsed, post_di, comment_di, labels = _archive_scores_labels(args)
    out = _out(args)
    pipeline.run_fe(parsed.posts, parsed.comments, labels, post_di, comment_di, out, args.m, args.exclude_self)
    return out


def cmd_strata(args):
    parsed, post_di, comment_di, labels = _archive_scores_labels(args)
    out = _out(args)
    threads = build_threads(parsed.posts, parsed.comments)
    pipeline.run_strata(threads, labels, comment_di, post_di, out, args.e, args.hours, args.esc_threshold)
    return out


def cmd_synth(args):
    try:
        cfg = SynthConfig.from_json(_existing(args.config)) if args.config else SynthConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"synth config: {exc}") from exc
    posts, comments, truth = generate_archive(cfg)
    out = _out(args)
    write_archive(out, posts, comments, truth)
    return out


def cmd_report(args):
    parsed = _load_archive(args)
    if not parsed.posts:
        raise SchemaError("archive contains no posts")
    if not parsed.comments:
        raise SchemaError("archive contains no comments attached to known posts")
    out = _out(args)
    lex, post_scores, comment_scores, labels, freq = _score_and_label(args, parsed)
    write_scores(out / "scores.csv", post_scores, comment_scores)
    comment_posts = {c.comment_id: c.post_id for c in parsed.comments}
    write_labels(out / "labels.csv", labels, comment_posts)

    post_di = {s.item_id: s.di for s in post_scores}
    comment_di = {s.item_id: s.di for s in comment_scores}
    label_map = {lab.comment_id: lab.label.value for lab in labels}
    stats = archive_summary(parsed.posts, parsed.comments)
    n_action, n_sensitive = lex.category_counts()
    report: dict = {
        "archive": {
            "n_posts": stats.n_posts, "n_comments": stats.n_comments, "n_agents": stats.n_agents,
            "n_quarantined": len(parsed.quarantined), "n_diagnostics": len(parsed.diagnostics),
        },
        "lexicon": {
            "n_action_patterns": n_action, "n_sensitive_patterns": n_sensitive,
            "cap": lex.cap, "count_mode": lex.count_mode,
            "post_di_positive_share": positive_share(post_scores),
        },
        "classification": freq,
    }
    try:
        sample = pipeline.regression_sample(label_map, comment_posts, post_di, args.basis)
    except ThreadgaugeError as exc:
        report["coupling"] = {"error": f"{exc.kind}: {exc}"}
        sample = None
    if sample is not None:
        report["coupling"] = pipeline.run_coupling(sample, out, args.bins, pipeline.MODELS, args.alpha, args.bin_level)
        try:
            report["permutation"] = pipeline.run_permtest(
                sample, out, args.perms, args.seed, args.bins, args.bin_level, args.jobs
            )
        except ThreadgaugeError as exc:
            report["permutation"] = {"error": f"{exc.kind}: {exc}"}
    threads = build_threads(parsed.posts, parsed.comments)
    report["event_alignment"] = pipeline.run_event_align(
        threads, label_map, comment_di, out, args.window_hours, args.fixed_n,
        args.resamples, args.alpha, args.seed, args.jobs,
    )
    report["fixed_effects"] = pipeline.run_fe(
        parsed.posts, parsed.comments, label_map, post_di, comment_di, out, args.m, args.exclude_self
    )
    report["strata"] = pipeline.run_strata(
        threads, label_map, comment_di, post_di, out, args.e, args.hours, args.esc_threshold
    )
    report["headline"] = _headline(report)
    write_json(out / "report.json", report)
    return out


def _headline(report: dict) -> dict:
    """Flat view of the quantities the coupling study reports."""
    c = report.get("coupling", {})
    glmm = c.get("glmm", {}) if isinstance(c, dict) else {}
    simple = c.get("simple", {}) if isinstance(c, dict) else {}
    perm = report.get("permutation", {})
    ea = report.get("event_alignment", {})
    return {
        "n_posts": report["archive"]["n_posts"],
        "n_comments": report["archive"]["n_comments"],
        "n_agents": report["archive"]["n_agents"],
        "post_di_positive_share": report["lexicon"]["post_di_positive_share"],
        "beta_simple": simple.get("beta"),
        "glmm_beta": glmm.get("beta"),
        "glmm_or": glmm.get("or_beta"),
        "glmm_or_ci": [glmm.get("or_ci_lo"), glmm.get("or_ci_hi")] if glmm.get("beta") is not None else None,
        "binned_slope": c.get("binned_slope") if isinstance(c, dict) else None,
        "p_perm_simple": perm.get("simple_slope", {}).get("p_two_sided"),
        "p_perm_binned": perm.get("binned_slope", {}).get("p_two_sided"),
        "n_regulatable": ea.get("n_regulatable"),
        "mean_delta": ea.get("mean_delta", {}).get("point"),
        "median_delta": ea.get("median_delta", {}).get("point"),
        "fixed_n_median": ea.get("fixed_n", {}).get("median"),
    }


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_archive(p, required=True):
    p.add_argument("--posts", required=required, help="posts file (.csv or .jsonl)")
    p.add_argument("--comments", required=required, help="comments file (.csv or .jsonl)")


def _add_lexicon(p):
    p.add_argument("--lexicon", help="lexicon CSV (pattern_id,category,regex); bundled demo if omitted")
    p.add_argument("--cap", type=_positive_int, default=10)
    p.add_argument("--count-mode", choices=COUNT_MODES, default="patterns")


def _add_coupling(p):
    p.add_argument("--bins", type=_positive_int, default=4, help="quantile bins for DI>0")
    p.add_argument("--bin-level", choices=("posts", "rows"), default="posts")
    p.add_argument("--basis", choices=("posts", "comments"), default="posts",
                   help="standardization basis for DI")


def _add_event(p):
    p.add_argument("--window-hours", type=float, default=12.0)
    p.add_argument("--fixed-n", type=_positive_int, default=5)
    p.add_argument("--resamples", type=_positive_int, default=20000)


def _add_fe(p):
    p.add_argument("--m", type=_m_list, default=[5, 10, 20])
    p.add_argument("--exclude-self", action="store_true", help="drop self-correction events")


def _add_strata(p):
    p.add_argument("--e", type=_positive_int, default=5)
    p.add_argument("--hours", type=float, default=6.0)
    p.add_argument("--esc-threshold", type=int, default=3)


def _common(seed_default: int | None = 0) -> argparse.ArgumentParser:
    # built fresh per subcommand: argparse shares parent actions, so set_defaults would leak
    common = _Parser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=seed_default)
    common.add_argument("--alpha", type=float, default=0.05)
    common.add_argument("--jobs", type=_positive_int, default=None,
                        help="worker threads (default: THREADGAUGE_JOBS or 1); never changes results")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="threadgauge", description="Directive-intensity and corrective-reply analysis")
    parser.add_argument("--version", action="version", version=f"threadgauge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[_common()], help="validate and normalize an archive")
    _add_archive(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", parents=[_common()], help="DI scores for posts and comments")
    _add_archive(p)
    _add_lexicon(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("classify", parents=[_common()], help="label comments")
    _add_archive(p)
    p.add_argument("--rules", help="rules CSV (family,regex); bundled demo if omitted")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("coupling", parents=[_common()], help="DI -> corrective coupling estimates")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--model", choices=(*pipeline.MODELS, "all"), default="all")
    _add_coupling(p)
    p.set_defaults(func=cmd_coupling)

    p = sub.add_parser("permtest", parents=[_common()], help="label-permutation null test")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--perms", type=_positive_int, default=1000)
    _add_coupling(p)
    p.set_defaults(func=cmd_permtest)

    p = sub.add_parser("bootstrap", parents=[_common()], help="percentile bootstrap of a mean or median")
    p.add_argument("--values", required=True, help="CSV with a value/delta column")
    p.add_argument("--estimand", choices=("mean", "median"), default="mean")
    p.add_argument("--resamples", type=_positive_int, default=20000)
    p.set_defaults(func=cmd_bootstrap)

    for name, adder, func, help_ in (
        ("event-align", _add_event, cmd_event_align, "before/after DI around the first corrective reply"),
        ("fe", _add_fe, cmd_fe, "within-agent fixed-effects check"),
        ("strata", _add_strata, cmd_strata, "stratified early-correction comparison"),
    ):
        p = sub.add_parser(name, parents=[_common()], help=help_)
        _add_archive(p)
        p.add_argument("--scores", required=True)
        p.add_argument("--labels", required=True)
        adder(p)
        p.set_defaults(func=func)

    p = sub.add_parser("synth", parents=[_common(None)], help="generate a synthetic archive")
    p.add_argument("--config", help="JSON file of SynthConfig fields")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", parents=[_common()], help="run the whole pipeline")
    _add_archive(p)
    _add_lexicon(p)
    p.add_argument("--rules")
    p.add_argument("--perms", type=_positive_int, default=1000)
    _add_coupling(p)
    _add_event(p)
    _add_fe(p)
    _add_strata(p)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.jobs = resolve_jobs(args.jobs)
    try:
        out = args.func(args)
        write_manifest(args, out)
    except FileNotFoundError as exc:
        return _fail("missing_file", f"input file not found: {exc.filename or exc}", 3)
    except ThreadgaugeError as exc:
        return _fail(exc.kind, str(exc), exc.exit_code)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Analysis steps shared by the individual commands and ``report``.

Each ``run_*`` function takes in-memory inputs, writes its artifacts into
``out_dir`` and returns a JSON-ready summary dict.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import inference, longitudinal, resampling
from .archive import CommentRecord, PostRecord, Thread, build_threads
from .classifier import InteractionType
from .errors import DegenerateDataError, ThreadgaugeError
from .tables import write_csv, write_json

log = logging.getLogger(__name__)

MODELS = ("simple", "glmm", "gee")


def regression_sample(
    labels: Mapping[str, str],
    comment_posts: Mapping[str, str],
    post_di: Mapping[str, int],
    basis: str = "posts",
) -> inference.RegressionSample:
    corrective = {cid: lab == InteractionType.CORRECTIVE.value for cid, lab in labels.items()}
    missing = sorted({comment_posts[c] for c in corrective if comment_posts.get(c) not in post_di})
    if missing:
        raise DegenerateDataError(f"{len(missing)} labeled comment(s) reference posts without a DI score")
    return inference.build_regression_sample(comment_posts, corrective, post_di, basis=basis)


def _fit_summary(fit) -> dict:
    d = asdict(fit)
    d.pop("random_effects", None)
    return d


def run_coupling(
    sample: inference.RegressionSample,
    out_dir: Path,
    q_bins: int = 4,
    models: Sequence[str] = MODELS,
    alpha: float = 0.05,
    bin_level: str = "posts",
) -> dict:
    binned = inference.bin_corrective_probability(sample, q_bins, alpha, bin_level)
    write_csv(out_dir / "coupling_bins.csv", ("bin_index", "bin_rule", "di_mean", "k", "n", "p_hat", "lo", "hi"), [
        {"bin_index": b.bin_index, "bin_rule": b.bin_rule, "di_mean": b.di_mean, "k": b.k, "n": b.n,
         "p_hat": b.p_hat, "lo": b.wilson.lo, "hi": b.wilson.hi}
        for b in binned
    ])
    report: dict = {
        "n_rows": len(sample),
        "n_posts": sample.n_clusters,
        "n_corrective": int(sample.y.sum()),
        "bins": [
            {"bin_index": b.bin_index, "bin_rule": b.bin_rule, "di_mean": b.di_mean, "k": b.k, "n": b.n,
             "p_hat": b.p_hat, "lo": b.wilson.lo, "hi": b.wilson.hi}
            for b in binned
        ],
        "binned_slope": inference.binned_slope(binned) if len(binned) >= 2 else None,
    }
    fitters = {
        "simple": inference.fit_logistic_simple,
        "glmm": inference.fit_glmm_laplace,
        "gee": inference.fit_gee_exchangeable,
    }
    for name in models:
        try:
            report[name] = _fit_summary(fitters[name](sample))
        except ThreadgaugeError as exc:
            log.warning("%s fit failed: %s", name, exc)
            report[name] = {"error": f"{exc.kind}: {exc}"}
    if "glmm" in report and "error" not in report["glmm"]:
        report["glmm"]["ci_method"] = "wald (normal 1.96 quantile)"
    write_json(out_dir / "coupling.json", report)
    return report


def run_permtest(
    sample: inference.RegressionSample,
    out_dir: Path,
    n_perm: int = 1000,
    seed: int = 0,
    q_bins: int = 4,
    bin_level: str = "posts",
    jobs: int | None = 1,
    hist_bins: int = 40,
) -> dict:
    simple, binned = resampling.permutation_null_test(sample, n_perm, seed, q_bins, bin_level, jobs)
    write_csv(out_dir / "perm_null_draws.csv", ("replicate", "simple_slope", "binned_slope"), [
        {"replicate": r, "simple_slope": float(simple.null_draws[r]), "binned_slope": float(binned.null_draws[r])}
        for r in range(n_perm)
    ])
    hist_rows = []
    for res in (simple, binned):
        finite = res.null_draws[np.isfinite(res.null_draws)]
        lo = min(finite.min(), res.observed)
        hi = max(finite.max(), res.observed)
        if hi <= lo:
            hi = lo + 1e-12
        counts, edges = np.histogram(finite, bins=hist_bins, range=(lo, hi))
        for i, c in enumerate(counts):
            hist_rows.append({"statistic": res.statistic_name, "bin_lo": float(edges[i]),
                              "bin_hi": float(edges[i + 1]), "count": int(c), "observed": res.observed})
    write_csv(out_dir / "perm_null_hist.csv", ("statistic", "bin_lo", "bin_hi", "count", "observed"), hist_rows)
    report = {"n_perm": n_perm, "seed": seed}
    for res in (simple, binned):
        finite = res.null_draws[np.isfinite(res.null_draws)]
        report[res.statistic_name] = {
            "observed": res.observed,
            "p_two_sided": res.p_two_sided,
            "n_valid": int(len(finite)),
            "n_failed": res.n_failed,
            "null_mean": float(finite.mean()),
            "null_sd": float(finite.std(ddof=1)) if len(finite) > 1 else None,
        }
    write_json(out_dir / "permtest.json", report)
    return report


def _boot(values, estimand, n_resamples, alpha, seed, jobs) -> dict:
    if len(values) < 2:
        return {"estimand": estimand, "error": "fewer than two threads"}
    b = resampling.bootstrap_percentile(values, estimand, n_resamples, alpha, seed, jobs)
    return {"estimand": b.estimand, "point": b.point, "ci_lo": b.ci_lo, "ci_hi": b.ci_hi,
            "n_resamples": b.n_resamples, "alpha": b.alpha}


def run_event_align(
    threads: Sequence[Thread],
    labels: Mapping[str, str],
    comment_di: Mapping[str, int],
    out_dir: Path,
    window_hours: float = 12.0,
    fixed_n: int = 5,
    n_resamples: int = 20000,
    alpha: float = 0.05,
    seed: int = 0,
    jobs: int | None = 1,
) -> dict:
    ea = longitudinal.event_aligned_deltas(threads, labels, comment_di, window_hours)
    fixed, fixed_median = longitudinal.fixed_n_comparison(ea.regulatable, fixed_n)
    fixed_by_post = {rt.post_id: rt.fixed_n_delta for rt in fixed}
    write_csv(out_dir / "event_deltas.csv",
              ("post_id", "delta", "regulatable", "fixed_n_delta", "n_before", "n_after", "t0"), [
        {"post_id": rt.post_id, "delta": rt.delta_mean, "regulatable": ok,
         "fixed_n_delta": fixed_by_post.get(rt.post_id, math.nan),
         "n_before": len(rt.window.before), "n_after": len(rt.window.after),
         "t0": rt.window.t0.strftime("%Y-%m-%dT%H:%M:%SZ")}
        for rt, ok in ea.usable
    ])
    deltas = np.array([rt.delta_mean for rt in ea.regulatable])
    fixed_deltas = np.array([rt.fixed_n_delta for rt in fixed])
    usable_deltas = np.array([rt.delta_mean for rt, _ in ea.usable])
    report = {
        "window_hours": window_hours,
        "census": ea.census,
        "n_regulatable": len(deltas),
        "median_delta_usable": float(np.median(usable_deltas)) if len(usable_deltas) else None,
        "mean_delta": _boot(deltas, "mean_delta", n_resamples, alpha, seed, jobs),
        "median_delta": _boot(deltas, "median_delta", n_resamples, alpha, seed, jobs),
        "fixed_n": {
            "n": fixed_n,
            "median": fixed_median if fixed else None,
            "bootstrap": _boot(fixed_deltas, "median_delta", n_resamples, alpha, seed, jobs),
        },
    }
    write_json(out_dir / "event_align.json", report)
    return report


def run_fe(
    posts: Sequence[PostRecord],
    comments: Sequence[CommentRecord],
    labels: Mapping[str, str],
    post_di: Mapping[str, int],
    comment_di: Mapping[str, int],
    out_dir: Path,
    ms: Sequence[int] = (5, 10, 20),
    exclude_self: bool = False,
) -> dict:
    events, diags = longitudinal.resolve_fe_events(posts, comments, labels)
    write_csv(out_dir / "fe_events.csv",
              ("event_time", "target_agent", "source_comment_id", "source_agent", "target_item_id",
               "self_correction", "fallback"), [
        {**asdict(e), "event_time": e.event_time.strftime("%Y-%m-%dT%H:%M:%SZ")} for e in events
    ])
    report: dict = {
        "n_events": len(events),
        "n_self_corrections": sum(e.self_correction for e in events),
        "n_fallback_targets": sum(e.fallback for e in events),
        "exclude_self": exclude_self,
        "diagnostics": diags,
        "by_m": {},
    }
    for m in ms:
        entry = {}
        for outcome in ("di", "positive"):
            panel = longitudinal.build_fe_panel(
                events, posts, comments, m, post_di, comment_di, outcome, exclude_self
            )
            if outcome == "di":
                write_csv(out_dir / f"fe_panel_M{m}.csv",
                          ("agent_id", "item_id", "kind", "time", "y", "treated"), [
                    {**asdict(r), "time": r.time.strftime("%Y-%m-%dT%H:%M:%SZ")} for r in panel
                ])
            try:
                fit = longitudinal.fit_within_fe(panel)
                entry[outcome] = asdict(fit)
            except DegenerateDataError as exc:
                entry[outcome] = {"error": str(exc), "n_obs": len(panel)}
        report["by_m"][str(m)] = entry
    write_json(out_dir / "fe.json", report)
    return report


def run_strata(
    threads: Sequence[Thread],
    labels: Mapping[str, str],
    comment_di: Mapping[str, int],
    post_di: Mapping[str, int],
    out_dir: Path,
    e: int = 5,
    h_hours: float = 6.0,
    esc_threshold: int = 3,
) -> dict:
    res = longitudinal.stratify_and_compare(threads, labels, comment_di, post_di, e, h_hours, esc_threshold)
    cols = list(res.table[0].keys())
    write_csv(out_dir / "strata.csv", cols, res.table)
    write_csv(out_dir / "strata_threads.csv",
              ("post_id", "di_bin", "engagement", "engagement_tercile", "early_max_di_bin", "early_by_count",
               "early_by_time", "n_downstream", "esc_high", "downstream_max", "downstream_mean"), [
        {"post_id": s.post_id, "di_bin": s.stratum.di_bin, "engagement": s.engagement,
         "engagement_tercile": s.stratum.engagement_tercile, "early_max_di_bin": s.stratum.early_max_di_bin,
         "early_by_count": s.early_by_count, "early_by_time": s.early_by_time,
         "n_downstream": s.n_downstream, "esc_high": s.esc_high,
         "downstream_max": s.downstream_max, "downstream_mean": s.downstream_mean}
        for s in res.threads
    ])
    summary = {
        "n_eligible_threads": len(res.threads),
        "tercile_edges": list(res.tercile_edges),
        "notes": res.notes,
        "e": e, "hours": h_hours, "esc_threshold": esc_threshold,
    }
    for definition in ("count", "time"):
        early = [s for s in res.threads if getattr(s, f"early_by_{definition}")]
        late = [s for s in res.threads if not getattr(s, f"early_by_{definition}")]
        summary[f"early_by_{definition}"] = {
            "n_early": len(early),
            "n_not_early": len(late),
            "esc_high_early": float(np.mean([s.esc_high for s in early])) if early else None,
            "esc_high_not_early": float(np.mean([s.esc_high for s in late])) if late else None,
        }
    write_json(out_dir / "strata.json", summary)
    return summary

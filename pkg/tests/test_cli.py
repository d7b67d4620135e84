import json

import pytest

from threadgauge import __version__
from threadgauge.cli import main
from threadgauge.tables import sha256_file

FAST = ["--perms", "60", "--resamples", "400"]


@pytest.fixture(scope="module")
def archive(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"n_posts": 150, "n_agents": 40, "true_beta": 0.6, "comment_di_rate": 1.5}))
    assert main(["synth", "--config", str(cfg), "--seed", "3", "--out", str(d / "arch")]) == 0
    return d / "arch"


def _args(archive):
    return ["--posts", str(archive / "posts.csv"), "--comments", str(archive / "comments.csv")]


def _dir_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_synth_outputs_and_manifest(archive):
    names = {p.name for p in archive.iterdir()}
    assert names == {"posts.csv", "comments.csv", "ground_truth.json", "manifest.json"}
    m = json.loads((archive / "manifest.json").read_text())
    assert m["command"] == "synth" and m["seed"] == 3 and m["tool_version"] == __version__
    assert m["outputs"] == ["comments.csv", "ground_truth.json", "posts.csv"]
    assert "config" in m["inputs"] and len(m["inputs"]["config"]["sha256"]) == 64


def test_individual_commands_chain(archive, tmp_path):
    a = _args(archive)
    assert main(["ingest", *a, "--out", str(tmp_path / "ing")]) == 0
    assert {"posts.csv", "comments.csv", "quarantine.csv", "diagnostics.json", "manifest.json"} <= {
        p.name for p in (tmp_path / "ing").iterdir()}
    assert main(["score", *a, "--out", str(tmp_path / "s")]) == 0
    assert main(["classify", *a, "--out", str(tmp_path / "c")]) == 0
    sl = ["--scores", str(tmp_path / "s" / "scores.csv"), "--labels", str(tmp_path / "c" / "labels.csv")]
    assert main(["coupling", *sl, "--model", "simple", "--out", str(tmp_path / "cp")]) == 0
    cp = json.loads((tmp_path / "cp" / "coupling.json").read_text())
    assert "simple" in cp and "glmm" not in cp and len(cp["bins"]) >= 2
    header = (tmp_path / "cp" / "coupling_bins.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["bin_index", "bin_rule", "di_mean"]
    assert main(["permtest", *sl, "--perms", "50", "--seed", "2", "--out", str(tmp_path / "pt")]) == 0
    pt = json.loads((tmp_path / "pt" / "permtest.json").read_text())
    assert 1 / 51 <= pt["simple_slope"]["p_two_sided"] <= 1
    assert main(["event-align", *a, *sl, "--resamples", "300", "--out", str(tmp_path / "ea")]) == 0
    assert main(["bootstrap", "--values", str(tmp_path / "ea" / "event_deltas.csv"), "--estimand", "median",
                 "--resamples", "300", "--out", str(tmp_path / "bs")]) == 0
    bs = json.loads((tmp_path / "bs" / "bootstrap.json").read_text())
    ea = json.loads((tmp_path / "ea" / "event_align.json").read_text())
    assert bs["n_values"] == ea["n_regulatable"]
    assert main(["fe", *a, *sl, "--m", "3,6", "--out", str(tmp_path / "fe")]) == 0
    fe = json.loads((tmp_path / "fe" / "fe.json").read_text())
    assert set(fe["by_m"]) == {"3", "6"}
    assert (tmp_path / "fe" / "fe_panel_M6.csv").exists()
    assert main(["strata", *a, *sl, "--out", str(tmp_path / "st")]) == 0
    assert len((tmp_path / "st" / "strata.csv").read_text().splitlines()) == 25


def test_report_recovers_sign_and_is_reproducible(archive, tmp_path):
    before = {p: sha256_file(archive / p) for p in ("posts.csv", "comments.csv")}
    runs = []
    for name, jobs in (("r1", "1"), ("r2", "1"), ("r8", "8")):
        out = tmp_path / name
        assert main(["report", *_args(archive), *FAST, "--seed", "7", "--jobs", jobs, "--out", str(out)]) == 0
        runs.append(_dir_bytes(out))
    assert runs[0] == runs[1] == runs[2]
    rep = json.loads(runs[0]["report.json"])
    assert rep["headline"]["glmm_beta"] > 0 and rep["headline"]["beta_simple"] > 0
    manifest = json.loads(runs[0]["manifest.json"])
    assert "jobs" not in manifest["flags"] and manifest["flags"]["perms"] == 60
    assert "report.json" in manifest["outputs"]
    assert before == {p: sha256_file(archive / p) for p in before}


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_exit_codes(archive, tmp_path, capsys):
    assert main(["report", *_args(archive), "--bogus", "--out", str(tmp_path)]) == 2
    assert _error(capsys)["exit_code"] == 2
    assert main(["frobnicate"]) == 2
    capsys.readouterr()
    assert main(["score", "--posts", str(tmp_path / "nope.csv"), "--comments", str(archive / "comments.csv"),
                 "--out", str(tmp_path / "x")]) == 3
    assert _error(capsys)["error"] == "missing_file"
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["ingest", "--posts", str(bad), "--comments", str(archive / "comments.csv"),
                 "--out", str(tmp_path / "x")]) == 4
    assert _error(capsys)["error"] == "schema_error"


def test_empty_archive_report_is_schema_error(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("post_id,author_id,created_at,title,body\n")
    (tmp_path / "c.csv").write_text("comment_id,post_id,parent_id,author_id,created_at,body\n")
    code = main(["report", "--posts", str(tmp_path / "p.csv"), "--comments", str(tmp_path / "c.csv"),
                 "--out", str(tmp_path / "out")])
    assert code == 4 and _error(capsys)["error"] == "schema_error"


def test_degenerate_data_exit_5(archive, tmp_path, capsys):
    assert main(["score", *_args(archive), "--out", str(tmp_path / "s")]) == 0
    labels = tmp_path / "labels.csv"
    rows = ["comment_id,post_id,label,matched_families"]
    for line in (archive / "comments.csv").read_text().splitlines()[1:]:
        cid, pid = line.split(",")[:2]
        rows.append(f"{cid},{pid},Neutral,")
    labels.write_text("\n".join(rows) + "\n")
    code = main(["permtest", "--scores", str(tmp_path / "s" / "scores.csv"), "--labels", str(labels),
                 "--perms", "10", "--out", str(tmp_path / "pt")])
    assert code == 5 and _error(capsys)["exit_code"] == 5


def test_bad_synth_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_postz": 3}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    _error(capsys)

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threadgauge.errors import LexiconError
from threadgauge.lexicon import (
    Lexicon,
    demo_lexicon,
    load_lexicon,
    positive_share,
    score_comments,
    score_posts,
    score_text,
)
from threadgauge.synth import DI_PHRASES as _PHRASE_MAP

DI_PHRASES = list(_PHRASE_MAP.values())

from conftest import comment, post


def _lex(rows, **kw):
    return load_lexicon([{"pattern_id": p, "category": c, "regex": r} for p, c, r in rows], **kw)


def test_category_counts():
    lex = _lex([("a1", "action", "run"), ("a2", "action", "go"), ("s1", "sensitive", "sudo")])
    assert lex.category_counts() == (2, 1)
    assert demo_lexicon().category_counts() == (7, 5)


def test_bad_regex_names_pattern():
    with pytest.raises(LexiconError, match="bad_one"):
        _lex([("ok", "action", "x"), ("bad_one", "action", "(")])


def test_unknown_category_and_duplicates():
    with pytest.raises(LexiconError):
        _lex([("x", "vibes", "a")])
    with pytest.raises(LexiconError):
        _lex([("x", "action", "a"), ("x", "action", "b")])
    with pytest.raises(LexiconError):
        _lex([("x", "action", "a")], cap=0)


def test_load_from_csv_handle():
    lex = load_lexicon(io.StringIO('pattern_id,category,regex\nr,action,"\\brun\\b"\n'))
    assert score_text("Please RUN the script", lex).di == 1


def test_empty_text_and_case():
    lex = _lex([("r", "action", r"\brun\b")])
    assert score_text("", lex).di == 0
    s = score_text("Please RUN the script", lex)
    assert (s.matches_action, s.matches_sensitive, s.di) == (1, 0, 1)


def test_cap_saturation():
    rows = [(f"p{i}", "action" if i < 7 else "sensitive", f"\\bw{i}x\\b") for i in range(12)]
    lex = _lex(rows)
    text = " ".join(f"w{i}x" for i in range(12))
    s = score_text(text, lex)
    assert s.matches_action + s.matches_sensitive == 12
    assert s.di == 10


def test_count_modes():
    lex = _lex([("r", "action", r"\brun\b")])
    assert score_text("run run run", lex).di == 1
    assert score_text("run run run", lex.with_options(count_mode="occurrences")).di == 3


def test_title_body_symmetry_and_comment_equivalence():
    lex = demo_lexicon()
    phrase = "sudo make sure to install it"
    a = score_posts([post("p", title=phrase, body="")], lex)[0]
    b = score_posts([post("p", title="", body=phrase)], lex)[0]
    assert a.di == b.di == 3
    c = score_comments([comment("c", "p", body=phrase)], lex)[0]
    assert c.di == b.di


def test_hand_counted_comment():
    # three action phrases, nothing sensitive
    body = "First install the tool, then click here and make sure you copy and paste it"
    s = score_comments([comment("c", "p", body=body)], demo_lexicon())[0]
    assert (s.matches_action, s.matches_sensitive, s.di) == (4, 0, 4)
    body = "install it, click below, step 2 done"
    assert score_text(body, demo_lexicon()).di == 3


def test_positive_share_on_built_corpus():
    rng = np.random.default_rng(1)
    lex = demo_lexicon()
    flags = np.zeros(1000, bool)
    flags[rng.choice(1000, 184, replace=False)] = True
    posts = [post(f"p{i}", body=DI_PHRASES[i % len(DI_PHRASES)] if f else "just chatting")
             for i, f in enumerate(flags)]
    assert positive_share(score_posts(posts, lex)) == pytest.approx(0.184, abs=1e-12)
    assert positive_share([]) == 0.0


def test_nfc_normalization():
    lex = _lex([("cafe", "action", "café")])
    assert score_text("café", lex).di == 1


_words = st.lists(st.sampled_from(DI_PHRASES + ["hello", "world", "RUN", "the", "x"]), max_size=15).map(" ".join)


@settings(max_examples=150, deadline=None)
@given(_words, _words)
def test_monotone_under_appending(a, b):
    lex = demo_lexicon()
    s1 = score_text(a, lex)
    s2 = score_text(a + " " + b, lex)
    assert s2.matches_action >= s1.matches_action
    assert s2.matches_sensitive >= s1.matches_sensitive


@settings(max_examples=150, deadline=None)
@given(_words, st.integers(1, 12))
def test_cap_bounds(text, cap):
    s = score_text(text, demo_lexicon(cap=cap))
    assert 0 <= s.di <= cap
    assert s.di == min(s.matches_action + s.matches_sensitive, cap)


@settings(max_examples=100, deadline=None)
@given(_words, st.randoms(use_true_random=False))
def test_pattern_order_invariance(text, rnd):
    lex = demo_lexicon()
    pats = list(lex.patterns)
    rnd.shuffle(pats)
    assert score_text(text, Lexicon(tuple(pats))) == score_text(text, lex)


@settings(max_examples=150, deadline=None)
@given(st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=60) | _words)
def test_case_invariance(text):
    lex = demo_lexicon()
    assert score_text(text.upper(), lex) == score_text(text, lex)

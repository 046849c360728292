import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deskpitch.metrics import (AlignmentCounts, EvalReport, EvalRow, Rates, UtteranceScore,
                               aggregate, align, cosine_similarity, rates, score)

from alignment_oracle import all_strings, best_counts, enumerate_paths, reachable_masks


def counts(ref, hyp):
    c = align(list(ref), list(hyp))
    return c.H, c.S, c.D, c.I


# --- alignment examples --------------------------------------------------------

@pytest.mark.parametrize("ref,hyp,expected", [
    ("abc", "abc", (3, 0, 0, 0)),
    ("abc", "", (0, 0, 3, 0)),
    ("abc", "abd", (2, 1, 0, 0)),
    ("ab", "abc", (2, 0, 0, 1)),
    ("abc", "ac", (2, 0, 1, 0)),
    ("abcd", "axc", (2, 1, 1, 0)),
    ("a", "b", (0, 1, 0, 0)),
])
def test_align_examples(ref, hyp, expected):
    assert counts(ref, hyp) == expected


def test_align_prefers_hits_among_equal_cost():
    # "ab" -> "ba": 2 subs or 1 hit + 1 del + 1 ins; both cost 2
    assert counts("ab", "ba") == (1, 0, 1, 1)


def test_align_empty_reference_rejected():
    with pytest.raises(ValueError):
        align([], ["a"])


def test_align_works_on_token_lists():
    assert align(["p1", "p10"], ["p1", "p1"]) == AlignmentCounts(1, 1, 0, 0)


# --- rates ---------------------------------------------------------------------

def test_rates_perfect():
    assert score("abc", "abc") == Rates(0.0, 0.0, 0.0, 1.0)


def test_rates_empty_hypothesis():
    r = score("abc", "")
    assert r.wer == 1.0 and r.mer == 1.0 and r.wip == 0.0 and r.wil == 1.0


def test_rates_hand_values():
    r = score("abc", "abd")
    assert r.wer == pytest.approx(1 / 3, abs=1e-15)
    assert r.mer == pytest.approx(1 / 3, abs=1e-15)
    assert r.wip == pytest.approx(4 / 9, abs=1e-15)
    assert r.wil == pytest.approx(5 / 9, abs=1e-15)


def test_rates_insertions_push_wer_above_one():
    r = score("a", "bcd")
    assert r.wer == 3.0 and r.mer == 1.0


def test_rates_reject_inconsistent_counts():
    with pytest.raises(ValueError):
        rates(AlignmentCounts(1, 0, 0, 0), 2, 1)


texts = st.text(alphabet="abcd", min_size=1, max_size=8)


@given(texts, st.text(alphabet="abcd", max_size=8))
def test_wil_plus_wip_is_one(ref, hyp):
    r = score(ref, hyp)
    assert abs(r.wil + r.wip - 1.0) <= 1e-12
    assert 0.0 <= r.mer <= 1.0 and 0.0 <= r.wip <= 1.0


@given(texts, st.text(alphabet="abcd", max_size=8))
def test_counts_consistent_with_lengths(ref, hyp):
    c = align(ref, hyp)
    assert c.H + c.S + c.D == len(ref)
    assert c.H + c.S + c.I == len(hyp)


# --- exhaustive oracle -----------------------------------------------------------

def test_oracle_matches_literal_path_enumeration():
    strings = all_strings("ab", 3)
    mask, _ = reachable_masks(strings)
    for i, r in enumerate(strings):
        for j, h in enumerate(strings):
            bits = {(b // 7, b % 7) for b in range(49) if int(mask[i, j]) >> b & 1}
            assert bits == enumerate_paths(r, h), (r, h)


def test_align_matches_exhaustive_oracle_small():
    strings = all_strings("abc", 4)
    mask, lengths = reachable_masks(strings)
    H, S, D, I = best_counts(mask, lengths)
    for i, r in enumerate(strings):
        if not r:
            continue
        for j, h in enumerate(strings):
            assert counts(r, h) == (H[i, j], S[i, j], D[i, j], I[i, j]), (r, h)


# --- cosine ---------------------------------------------------------------------------

def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_cosine_scale_invariant(k, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(5), rng.standard_normal(5)
    assert abs(cosine_similarity(k * a, b) - cosine_similarity(a, b)) <= 1e-12


def test_cosine_rejects_zero_and_mismatch():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0], [1, 0, 0])


# --- reports ---------------------------------------------------------------------------

def test_report_layout():
    text = EvalReport([EvalRow("Predictors based", 0.05, 0.04, 0.1, 0.9, 0.81234)]).to_tsv()
    lines = text.splitlines()
    assert lines[0] == "config\tWER\tMER\tWIL\tWIP\tCosSim"
    assert lines[1] == "Predictors based\t5.00\t4.00\t10.00\t90.00\t0.81"


unit = st.floats(0, 1, allow_nan=False)


@given(st.lists(st.tuples(unit, unit, unit, st.floats(-1, 1)), min_size=1, max_size=4))
def test_report_roundtrip_on_rounded_values(vals):
    rep = EvalReport([EvalRow(f"c{i}", w, m, 1 - p, p, c) for i, (w, m, p, c) in enumerate(vals)])
    once = EvalReport.from_tsv(rep.to_tsv())
    assert once.rows == rep.rounded().rows
    assert EvalReport.from_tsv(once.to_tsv()).rows == once.rows
    assert once.to_tsv() == rep.to_tsv()


def test_report_file_roundtrip(tmp_path):
    rep = EvalReport([EvalRow("freeze=dur", 0.0, 0.0, 0.0, 1.0, 0.84)])
    rep.write(tmp_path / "r.tsv")
    assert EvalReport.read(tmp_path / "r.tsv").rows == rep.rounded().rows


def test_report_rejects_bad_header_and_label():
    with pytest.raises(ValueError):
        EvalReport.from_tsv("a\tb\n")
    with pytest.raises(ValueError):
        EvalReport([EvalRow("a\tb", 0, 0, 1, 0, 0)]).to_tsv()


def test_aggregate_is_per_utterance_mean():
    s1 = UtteranceScore(score("ab", "ab"), 1.0)
    s2 = UtteranceScore(score("abcd", "abcx"), 0.5)
    row = aggregate("x", [s1, s2])
    assert row.wer == pytest.approx(0.125)
    assert row.cos_sim == pytest.approx(0.75)
    assert row.wil + row.wip == 1.0
    with pytest.raises(ValueError):
        aggregate("x", [])

import itertools

import pytest

from icdollo.lexproc import (
    AlignmentCosts,
    SegmentedForm,
    SegmentTable,
    UnknownSegmentError,
    UnrelatableFormsError,
    WordEntry,
    align_etymon,
    code_dataset,
    code_language,
    detect_ic,
    lcs_base,
    lcs_length,
    load_etyma,
    load_wordlist,
    normalize,
)
from icdollo.traits import TraitKind, TraitState

from oracles import best_span, is_subsequence, lcs_length_dp


def seg(text, table):
    return normalize(text, table)


def test_geminate_collapse(table):
    f = seg("t a t t a", table)
    assert f.segments == ("t", "a", "t", "a")
    assert seg("t a tː a", table).segments == ("t", "a", "t", "a")
    assert seg("tatta", table).segments == ("t", "a", "t", "a")


def test_boundary_blocks_collapse(table):
    f = seg("b a t + t a", table)
    assert f.segments == ("b", "a", "t", "t", "a")
    assert f.boundaries == (3,)


def test_boundary_position(table):
    f = seg("b a + b a", table)
    assert f.segments == ("b", "a", "b", "a")
    assert f.boundaries == (2,)
    assert str(f) == "b a + b a"
    # edge boundaries carry no information
    assert seg("+ b a -", table).boundaries == ()


def test_unknown_symbol_named(table):
    with pytest.raises(UnknownSegmentError, match="q"):
        seg("b a q", table)


def test_digraph_longest_match(table):
    assert seg("tsatsa", table).segments == ("ts", "a", "ts", "a")
    assert seg("t s a", table).segments == ("t", "s", "a")


@pytest.mark.parametrize(
    "text, expected",
    [("d e d e k", True), ("b i b e t", True), ("b a + b a", False), ("m a n o", False), ("b a - b a", False)],
)
def test_detect_ic_examples(table, text, expected):
    assert detect_ic(seg(text, table), table) is expected


def test_detect_ic_needs_a_vowel_between(table):
    assert not detect_ic(seg("t ˥ t", table), table)
    assert detect_ic(seg("t a a t", table), table)  # the doubled vowel collapses first
    assert not detect_ic(seg("t a e t", table), table)


def test_detect_ic_invariant_under_doubling(table, rng):
    alphabet = ["t", "d", "k", "a", "e", "i", "+"]
    for _ in range(300):
        toks = list(rng.choice(alphabet, int(rng.integers(1, 9))))
        if all(t == "+" for t in toks):
            continue
        base = detect_ic(seg(" ".join(toks), table), table)
        k = int(rng.integers(len(toks)))
        if toks[k] == "+":
            continue
        doubled = toks[: k + 1] + [toks[k]] + toks[k + 1 :]
        assert detect_ic(seg(" ".join(doubled), table), table) == base


def test_align_identity(table):
    f = seg("d a p d a p", table)
    span = align_etymon(f, f, table)
    assert (span.start, span.end, span.cost) == (0, 6, 0.0)


def test_align_drops_spurious_prefix(table):
    et = seg("d a p d a p", table)
    span = align_etymon(et, seg("m a d a p d a p", table), table)
    assert span.form.segments == et.segments
    assert span.start == 2


def test_align_single_segment_fallback(table):
    span = align_etymon(seg("a", table), seg("t k", table), table)
    assert span.end - span.start == 1 and span.cost == 1.0 and span.start == 0


def _sub(table, costs=AlignmentCosts()):
    return lambda a, b: costs.substitution(a, b, table)


def test_align_matches_brute_force(table, rng):
    alphabet = ["t", "d", "k", "a", "i", "m"]
    for _ in range(150):
        et = tuple(rng.choice(alphabet, int(rng.integers(1, 6))))
        rf = tuple(rng.choice(alphabet, int(rng.integers(1, 9))))
        e, r = SegmentedForm(et), SegmentedForm(rf)
        span = align_etymon(e, r, table)
        cost, start, length = best_span(et, rf, _sub(table))
        assert (span.cost, span.start, span.end - span.start) == (cost, start, length)


def test_lcs_javanese_pair(table):
    base = lcs_base([seg("n i ṭ i k", table), seg("ṭ i ṭ i k", table)])
    assert base.segments == ("i", "ṭ", "i", "k")


def test_lcs_identity_and_disjoint(table):
    f = seg("b a + t u", table)
    assert lcs_base([f, f]) == f
    with pytest.raises(UnrelatableFormsError):
        lcs_base([seg("t t", table), seg("a", table)])
    with pytest.raises(ValueError):
        lcs_base([f])


def test_lcs_matches_dp(rng):
    for _ in range(1000):
        a = tuple(rng.choice(list("abcd"), int(rng.integers(0, 13))))
        b = tuple(rng.choice(list("abcd"), int(rng.integers(0, 13))))
        assert lcs_length(a, b) == lcs_length_dp(a, b)


def test_lcs_base_is_common_subsequence(table, rng):
    for _ in range(200):
        forms = [SegmentedForm(tuple(rng.choice(["t", "a", "k", "i"], int(rng.integers(2, 9))))) for _ in range(3)]
        try:
            base = lcs_base(forms)
        except UnrelatableFormsError:
            continue
        assert all(is_subsequence(base.segments, f.segments) for f in forms)


def test_lcs_leftmost_tie_break():
    base = lcs_base([SegmentedForm(("a", "b", "a")), SegmentedForm(("a",))])
    assert base.segments == ("a",)
    # "ab" and "ba" tie; the first form decides
    assert lcs_base([SegmentedForm(("a", "b")), SegmentedForm(("b", "a"))]).segments == ("a",)


ETYMA = {"c1": "*dedek", "c2": "mata", "c3": "lima"}


def _entries(*rows):
    return [WordEntry(lang, cog, form, group) for lang, cog, form, group in rows]


def test_code_language_rows(table):
    rows = code_language(_entries(("X", "c1", "dedek", None), ("X", "c2", "mata", None), ("X", "c2", "tata", None)), ETYMA, table)
    assert rows["c1"] == (0, 0, 1)
    assert rows["c2"] == (0, 1, 1)
    assert rows["c3"] == (1, 0, 0)


def test_code_language_aligns_before_detection(table):
    # the IC lives in a prefix that is not homologous with the etymon
    rows = code_language(_entries(("X", "c3", "bab+lima", None)), ETYMA, table)
    assert rows["c3"] == (0, 1, 0)


def test_code_language_group_reduces_to_base(table):
    rows = code_language(_entries(("X", "c1", "niṭik", "g"), ("X", "c1", "ṭiṭik", "g")), {"c1": "ṭiṭik"}, table)
    assert rows["c1"] == (0, 1, 0)


def test_code_language_errors_carry_context(table):
    with pytest.raises(ValueError, match="X/c9"):
        code_language(_entries(("X", "c9", "mata", None)), ETYMA, table)
    with pytest.raises(ValueError, match="X/c2"):
        code_language(_entries(("X", "c2", "maqa", None)), ETYMA, table)


def test_code_dataset_class_traits(table):
    entries = _entries(("X", "c1", "dedek", None), ("Y", "c1", "deke", None), ("Y", "c2", "mata", None))
    res = code_dataset(entries, table, ETYMA)
    by_id = {t.trait_id: t for t in res.traits}
    assert by_id["c1"].kind is TraitKind.COGNATE_CLASS
    assert by_id["c1"].recon_state is TraitState.PLUS_IC
    assert by_id["c1"].rows == {"X": (0, 0, 1), "Y": (0, 1, 0)}
    assert by_id["c2"].recon_state is TraitState.MINUS_IC
    assert res.skipped == [("c3", "no reflexes")]


def test_code_dataset_concept_traits(table):
    entries = [
        WordEntry("X", "k1", "bibet", concept="drink"),
        WordEntry("Y", "k1", "bebe", concept="drink"),
        WordEntry("Y", "k2", "suk", concept="drink"),
    ]
    res = code_dataset(entries, table)
    by_id = {t.trait_id: t for t in res.traits}
    assert set(by_id) == {"drink:k1", "drink:k2"}
    assert by_id["drink:k1"].rows == {"X": (0, 0, 1), "Y": (0, 0, 1)}
    assert all(t.concept_id == "drink" for t in res.traits)
    with pytest.raises(ValueError, match="concept"):
        code_dataset([WordEntry("X", "k1", "bibet")], table)


def test_file_loaders(tmp_path):
    w = tmp_path / "w.tsv"
    w.write_text("language\tcognate_id\tform\tgroup\nA\tc1\tdedek\t\nA\tc1\tniṭik\tg1\n", encoding="utf-8")
    entries = load_wordlist(w)
    assert entries[0].group is None and entries[1].group == "g1" and entries[1].line == 3
    e = tmp_path / "e.tsv"
    e.write_text("cognate_id\tform\nc1\t*dedek\n", encoding="utf-8")
    assert load_etyma(e) == {"c1": "dedek"}
    w.write_text("language\tform\nA\tx\n")
    with pytest.raises(ValueError, match="cognate_id"):
        load_wordlist(w)


def test_segment_table_load(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("symbol\tclass\nt\tC\na\tV\nts\tC\n", encoding="utf-8")
    t = SegmentTable.load(p)
    assert t.is_consonant("ts") and t.is_vowel("a") and t.digraphs == ["ts"]
    p.write_text("symbol\tclass\nt\tC\nt\tV\n", encoding="utf-8")
    with pytest.raises(ValueError):
        SegmentTable.load(p)


def test_all_short_forms_roundtrip(table):
    for toks in itertools.product(["t", "a", "+"], repeat=4):
        if all(t == "+" for t in toks):
            continue
        f = seg(" ".join(toks), table)
        assert seg(str(f), table) == f

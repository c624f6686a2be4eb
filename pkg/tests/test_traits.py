import io

import pytest

from icdollo.phylo import parse_newick
from icdollo.traits import (
    TraitFileError,
    TraitKind,
    TraitMatrix,
    TraitState,
    dump_traits,
    filter_dataset,
    load_allow_list,
    load_traits,
    state_support,
)

HEADER = "trait_id\tkind\tconcept_id\trecon_state\ttip_label\tstate\n"


def _load(body: str):
    return load_traits(io.StringIO(HEADER + body))


def test_load_basic_rows():
    (t,) = _load("t1\tclass\t*\t-IC\tA\t-IC\nt1\tclass\t*\t-IC\tB\tABSENT\n")
    assert t.rows == {"A": (0, 1, 0), "B": (1, 0, 0)}
    assert t.recon_state is TraitState.MINUS_IC
    assert t.row("unlisted") == (1, 0, 0)


def test_duplicate_rows_are_polymorphic():
    (t,) = _load("t1\tclass\t*\t-IC\tA\t-IC\nt1\tclass\t*\t-IC\tA\t+IC\n")
    assert t.rows["A"] == (0, 1, 1)


def test_unknown_state_names_line():
    with pytest.raises(TraitFileError, match=":3:"):
        _load("t1\tclass\t*\t-IC\tA\t-IC\nt1\tclass\t*\t-IC\tB\tIC\n")


def test_class_trait_needs_recon():
    with pytest.raises(TraitFileError, match="recon_state"):
        _load("t1\tclass\t*\t\tA\t-IC\n")


def test_concept_trait_needs_concept():
    with pytest.raises(TraitFileError):
        _load("t1\tconcept\t\t\tA\t-IC\n")


def test_trait_needs_a_present_tip():
    with pytest.raises(ValueError):
        TraitMatrix("t", TraitKind.COGNATE_CLASS, {"A": (1, 0, 0)}, recon_state=TraitState.MINUS_IC)
    with pytest.raises(ValueError):
        TraitMatrix("t", TraitKind.COGNATE_CLASS, {"A": (0, 0, 0)}, recon_state=TraitState.MINUS_IC)


def test_round_trip():
    text = (
        HEADER
        + "t1\tclass\t\t-IC\tA\t-IC\n"
        + "t1\tclass\t\t-IC\tA\t+IC\n"
        + "t1\tclass\t\t-IC\tB\tABSENT\n"
        + "t2\tconcept\tc9\t\tC\t+IC\n"
    )
    traits = load_traits(io.StringIO(text))
    assert dump_traits(traits) == text
    assert load_traits(io.StringIO(dump_traits(traits))) == traits


def test_unicode_minus_accepted():
    assert TraitState.parse("−IC") is TraitState.MINUS_IC


def _t(tid, rows, recon=TraitState.MINUS_IC):
    return TraitMatrix(tid, TraitKind.COGNATE_CLASS, rows, recon_state=recon)


def test_state_support_examples():
    s = state_support(_t("a", {"A": (0, 1, 0), "B": (1, 0, 0)}))
    assert s.states == {TraitState.ABSENT, TraitState.MINUS_IC}
    s = state_support(_t("b", {"A": (0, 1, 0), "B": (0, 0, 1), "C": (1, 0, 0)}))
    assert s.states == set(TraitState) and s.has_both_ic
    s = state_support(_t("c", {"A": (0, 1, 1)}), tips=["A", "B"])
    assert s.states == set(TraitState)


def _star(n):
    return parse_newick("(" + ",".join(f"L{i}:1" for i in range(n)) + ");")


def test_filter_identity_at_zero_thresholds():
    traits = [_t("a", {"L0": (0, 1, 0)}), _t("b", {"L1": (0, 0, 1), "L2": (0, 1, 0)})]
    res = filter_dataset(traits, _star(3), 0, 0.0)
    assert res.traits == traits
    assert res.dropped == []


def test_filter_coverage_is_strict():
    tree = _star(10)
    rare = _t("rare", {"L0": (0, 1, 0)})
    common = _t("common", {f"L{i}": (0, 1, 0) for i in range(10)})
    kept, dropped = filter_dataset([rare, common], tree, 0, 0.10)
    assert [t.trait_id for t in kept] == ["common"]
    assert dropped[0][0] == "rare"


def test_filter_reflex_threshold_and_idempotence():
    tree = _star(4)
    traits = [
        _t(f"t{k}", {"L0": (0, 1, 0), "L1": (0, 1, 0), **({"L2": (0, 1, 0)} if k < 2 else {})})
        for k in range(5)
    ]
    res = filter_dataset(traits, tree, 2, 0.0)
    assert set(res.languages) == {"L0", "L1"}
    assert all(set(t.rows) <= {"L0", "L1"} for t in res.traits)
    again = filter_dataset(res.traits, res.languages, 2, 0.0)
    assert again.traits == res.traits and again.dropped == []
    assert "entity\treason" in res.dropped_tsv()


def test_filter_empty_result_raises():
    with pytest.raises(ValueError, match="removed every"):
        filter_dataset([_t("a", {"L0": (0, 1, 0)})], _star(3), 5, 0.0)


def test_allow_list(tmp_path):
    p = tmp_path / "allow.txt"
    p.write_text("# concepts\nwater\nfire\t12\n\n")
    assert load_allow_list(p) == {"water", "fire"}

"""Coded trait observations, the TSV trait format, and dataset filters."""

from __future__ import annotations

import csv
import enum
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class TraitState(enum.IntEnum):
    ABSENT = 0
    MINUS_IC = 1
    PLUS_IC = 2

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @classmethod
    def parse(cls, token: str) -> TraitState:
        key = token.strip().replace("−", "-").upper()
        try:
            return _FROM_TOKEN[key]
        except KeyError:
            raise ValueError(f"unknown state token {token!r} (expected ABSENT, -IC or +IC)") from None


_TOKENS = {TraitState.ABSENT: "ABSENT", TraitState.MINUS_IC: "-IC", TraitState.PLUS_IC: "+IC"}
_FROM_TOKEN = {v: k for k, v in _TOKENS.items()}


class TraitKind(str, enum.Enum):
    COGNATE_CLASS = "class"
    COGNATE_CONCEPT = "concept"

    @classmethod
    def parse(cls, token: str) -> TraitKind:
        t = token.strip().lower()
        for kind in cls:
            if t in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown trait kind {token!r}")


Row = tuple[int, int, int]
ABSENT_ROW: Row = (1, 0, 0)


class TraitFileError(ValueError):
    pass


@dataclass(frozen=True)
class TraitMatrix:
    """Per-tip 0/1 likelihood rows over (ABSENT, -IC, +IC).

    Tips that are not listed are observed ABSENT with certainty.
    """

    trait_id: str
    kind: TraitKind
    rows: Mapping[str, Row]
    concept_id: str | None = None
    recon_state: TraitState | None = None

    def __post_init__(self):
        kind = TraitKind(self.kind)
        object.__setattr__(self, "kind", kind)
        rows = {k: tuple(int(x) for x in v) for k, v in self.rows.items()}
        object.__setattr__(self, "rows", rows)
        for label, row in rows.items():
            if len(row) != 3 or any(x not in (0, 1) for x in row):
                raise ValueError(f"trait {self.trait_id}, tip {label}: row must be three 0/1 entries")
            if not any(row):
                raise ValueError(f"trait {self.trait_id}, tip {label}: row has no possible state")
        if not any(row[1] or row[2] for row in rows.values()):
            raise ValueError(f"trait {self.trait_id}: no tip attests the trait")
        if kind is TraitKind.COGNATE_CONCEPT:
            if not self.concept_id:
                raise ValueError(f"trait {self.trait_id}: concept traits need a concept id")
        else:
            if self.recon_state is None:
                raise ValueError(f"trait {self.trait_id}: cognate-class traits need a reconstructed state")
            recon = TraitState(self.recon_state)
            if recon is TraitState.ABSENT:
                raise ValueError(f"trait {self.trait_id}: reconstructed state cannot be ABSENT")
            object.__setattr__(self, "recon_state", recon)

    def row(self, label: str) -> Row:
        return self.rows.get(label, ABSENT_ROW)

    def present_tips(self) -> list[str]:
        return [t for t, r in self.rows.items() if r[1] or r[2]]

    def restricted(self, labels: Iterable[str]) -> TraitMatrix | None:
        """Same trait with rows limited to ``labels``; None if nothing is left present."""
        keep = set(labels)
        rows = {t: r for t, r in self.rows.items() if t in keep}
        if not any(r[1] or r[2] for r in rows.values()):
            return None
        return TraitMatrix(self.trait_id, self.kind, rows, self.concept_id, self.recon_state)


@dataclass(frozen=True)
class StateSupport:
    trait_id: str
    states: frozenset[TraitState]

    def __contains__(self, state) -> bool:
        return state in self.states

    @property
    def has_both_ic(self) -> bool:
        return TraitState.MINUS_IC in self.states and TraitState.PLUS_IC in self.states


def state_support(trait: TraitMatrix, tips: Iterable[str] | None = None) -> StateSupport:
    """States attested by a trait.

    Any 1 in a -IC/+IC column counts; ABSENT counts only for tips that are
    unambiguously absent.  If ``tips`` is given, unlisted tips among them
    count as absent.
    """
    states = set()
    for row in trait.rows.values():
        if row == ABSENT_ROW:
            states.add(TraitState.ABSENT)
        if row[1]:
            states.add(TraitState.MINUS_IC)
        if row[2]:
            states.add(TraitState.PLUS_IC)
    if tips is not None and any(t not in trait.rows for t in tips):
        states.add(TraitState.ABSENT)
    return StateSupport(trait.trait_id, frozenset(states))


# -- TSV ----------------------------------------------------------------

COLUMNS = ("trait_id", "kind", "concept_id", "recon_state", "tip_label", "state")


def _blank(value: str | None) -> bool:
    return value is None or value.strip() in ("", "*", "NA")


def load_traits(source) -> list[TraitMatrix]:
    """Read the trait TSV; ``source`` is a path or an open text file."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8", newline="") as fh:
            return _read_traits(fh, str(source))
    return _read_traits(source, getattr(source, "name", "<traits>"))


def _read_traits(fh, name: str) -> list[TraitMatrix]:
    reader = csv.reader(fh, delimiter="\t")
    header = next(reader, None)
    if header is None:
        raise TraitFileError(f"{name}: empty file")
    header = [h.strip() for h in header]
    missing = {"trait_id", "kind", "tip_label", "state"} - set(header)
    if missing:
        raise TraitFileError(f"{name}: missing columns {sorted(missing)}")
    col = {h: i for i, h in enumerate(header)}

    meta: dict[str, tuple] = {}
    rows: dict[str, dict[str, list[int]]] = defaultdict(dict)
    order: list[str] = []
    for lineno, rec in enumerate(reader, 2):
        if not rec or all(not x.strip() for x in rec):
            continue

        def get(key):
            return rec[col[key]].strip() if key in col and col[key] < len(rec) else None

        try:
            tid = get("trait_id")
            kind = TraitKind.parse(get("kind"))
            state = TraitState.parse(get("state"))
            concept = None if _blank(get("concept_id")) else get("concept_id")
            recon = None if _blank(get("recon_state")) else TraitState.parse(get("recon_state"))
        except (ValueError, TypeError) as exc:
            raise TraitFileError(f"{name}:{lineno}: {exc}") from None
        tip = get("tip_label")
        if not tid or not tip:
            raise TraitFileError(f"{name}:{lineno}: empty trait id or tip label")
        if kind is TraitKind.COGNATE_CLASS and recon is None:
            raise TraitFileError(f"{name}:{lineno}: cognate-class trait {tid!r} lacks recon_state")
        if tid not in meta:
            meta[tid] = (kind, concept, recon)
            order.append(tid)
        elif meta[tid] != (kind, concept, recon):
            raise TraitFileError(f"{name}:{lineno}: inconsistent kind/concept/recon for trait {tid!r}")
        row = rows[tid].setdefault(tip, [0, 0, 0])
        row[state] = 1

    out = []
    for tid in order:
        kind, concept, recon = meta[tid]
        try:
            out.append(TraitMatrix(tid, kind, {t: tuple(r) for t, r in rows[tid].items()}, concept, recon))
        except ValueError as exc:
            raise TraitFileError(f"{name}: {exc}") from None
    return out


def dump_traits(traits: Iterable[TraitMatrix]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(COLUMNS)
    for t in traits:
        recon = t.recon_state.token if t.recon_state is not None else ""
        for tip, row in t.rows.items():
            for s in TraitState:
                if row[s]:
                    w.writerow((t.trait_id, t.kind.value, t.concept_id or "", recon, tip, s.token))
    return buf.getvalue()


def write_traits(traits: Iterable[TraitMatrix], path) -> None:
    Path(path).write_text(dump_traits(traits), encoding="utf-8")


def load_allow_list(path) -> set[str]:
    """One id per line (first TSV column); '#' comments allowed."""
    ids = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.add(line.split("\t")[0].strip())
    return ids


# -- filters ---------------------------------------------------------------

@dataclass
class FilterResult:
    traits: list[TraitMatrix]
    languages: list[str]
    dropped: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        # allows ``traits, dropped = filter_dataset(...)``
        return iter((self.traits, self.dropped))

    def dropped_tsv(self) -> str:
        return "entity\treason\n" + "".join(f"{e}\t{r}\n" for e, r in self.dropped)


def filter_dataset(
    traits: Sequence[TraitMatrix],
    tree_or_languages,
    min_reflexes: int = 250,
    min_coverage: float = 0.10,
) -> FilterResult:
    """Keep languages with more than ``min_reflexes`` present traits and traits
    present in more than ``min_coverage`` of the remaining languages.

    ``tree_or_languages`` is a Phylogeny (its tips are the languages) or an
    iterable of language labels.

    The two filters interact (dropping traits lowers reflex counts), so they
    are applied until nothing changes.
    """
    if min_reflexes < 0 or not 0.0 <= min_coverage <= 1.0:
        raise ValueError("min_reflexes must be >= 0 and min_coverage in [0, 1]")
    if hasattr(tree_or_languages, "tip_labels"):
        languages = list(tree_or_languages.tip_labels)
    else:
        languages = list(tree_or_languages)
    current = list(traits)
    dropped: list[tuple[str, str]] = []
    while True:
        counts = {lang: 0 for lang in languages}
        for t in current:
            for tip in t.present_tips():
                if tip in counts:
                    counts[tip] += 1
        bad_langs = [lang for lang in languages if counts[lang] <= min_reflexes]
        for lang in bad_langs:
            dropped.append((lang, f"language with {counts[lang]} reflexes (needs > {min_reflexes})"))
        languages = [lang for lang in languages if counts[lang] > min_reflexes]

        kept = []
        n_lang = len(languages)
        lang_set = set(languages)
        for t in current:
            present = sum(1 for tip in t.present_tips() if tip in lang_set)
            if present > min_coverage * n_lang and present > 0:
                kept.append(t)
            else:
                dropped.append((t.trait_id, f"trait present in {present}/{n_lang} languages (needs > {min_coverage:g})"))
        changed = bool(bad_langs) or len(kept) != len(current)
        current = kept
        if not changed:
            break
    current = [r for r in (t.restricted(languages) for t in current) if r is not None]
    if not current or not languages:
        raise ValueError("filter_dataset removed every trait or language; check the thresholds")
    return FilterResult(current, languages, dropped)

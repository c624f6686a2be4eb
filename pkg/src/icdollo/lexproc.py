"""Word-list coding: segmentation, geminate collapse, identical-consonant
(IC) detection, etymon alignment and longest-common-subsequence bases."""

from __future__ import annotations

import csv
import enum
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .traits import TraitKind, TraitMatrix, TraitState

BOUNDARY_MARKS = frozenset("+-")
LENGTH_MARK = "ː"


class SegmentClass(str, enum.Enum):
    CONSONANT = "C"
    VOWEL = "V"
    OTHER = "O"

    @classmethod
    def parse(cls, token: str) -> SegmentClass:
        t = token.strip().upper()
        for c in cls:
            if t in (c.value, c.name):
                return c
        raise ValueError(f"unknown segment class {token!r} (use CONSONANT, VOWEL or OTHER)")


class UnknownSegmentError(ValueError):
    def __init__(self, symbols: Iterable[str], form: str):
        self.symbols = sorted(set(symbols))
        super().__init__(f"unclassified segment(s) {', '.join(map(repr, self.symbols))} in {form!r}")


class UnrelatableFormsError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentTable:
    classes: Mapping[str, SegmentClass]

    def __post_init__(self):
        object.__setattr__(self, "classes", {k: SegmentClass(v) for k, v in self.classes.items()})
        if any(not k for k in self.classes):
            raise ValueError("empty segment symbol")

    @property
    def digraphs(self) -> list[str]:
        return sorted((s for s in self.classes if len(s) > 1), key=len, reverse=True)

    @property
    def max_symbol(self) -> int:
        return max(map(len, self.classes), default=1)

    def cls(self, seg: str) -> SegmentClass:
        return self.classes[seg]

    def is_consonant(self, seg: str) -> bool:
        return self.classes.get(seg) is SegmentClass.CONSONANT

    def is_vowel(self, seg: str) -> bool:
        return self.classes.get(seg) is SegmentClass.VOWEL

    def consonants(self) -> list[str]:
        return [s for s, c in self.classes.items() if c is SegmentClass.CONSONANT]

    @classmethod
    def load(cls, path) -> SegmentTable:
        """TSV with columns symbol, class; a header row is optional."""
        classes: dict[str, SegmentClass] = {}
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not rec or not rec[0].strip() or rec[0].startswith("#"):
                    continue
                if lineno == 1 and rec[0].strip().lower() == "symbol":
                    continue
                if len(rec) < 2:
                    raise ValueError(f"{path}:{lineno}: expected symbol<TAB>class")
                sym = rec[0].strip()
                try:
                    c = SegmentClass.parse(rec[1])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
                if sym in classes and classes[sym] is not c:
                    raise ValueError(f"{path}:{lineno}: {sym!r} classified twice")
                classes[sym] = c
        return cls(classes)


@dataclass(frozen=True)
class SegmentedForm:
    """Segments plus morpheme boundaries; boundary k sits between segments k-1 and k."""

    segments: tuple[str, ...]
    boundaries: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "boundaries", tuple(self.boundaries))
        b = self.boundaries
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError("boundaries must be strictly increasing")
        if b and not (0 < b[0] and b[-1] < len(self.segments)):
            raise ValueError("boundaries must lie strictly inside the form")

    def __len__(self) -> int:
        return len(self.segments)

    def __str__(self) -> str:
        out = []
        bset = set(self.boundaries)
        for i, s in enumerate(self.segments):
            if i in bset:
                out.append("+")
            out.append(s)
        return " ".join(out)

    def span(self, start: int, end: int) -> SegmentedForm:
        return SegmentedForm(self.segments[start:end], tuple(k - start for k in self.boundaries if start < k < end))


# -- normalisation -------------------------------------------------------------------

def _tokenize(raw: str, table: SegmentTable) -> list[str]:
    if any(ch.isspace() for ch in raw.strip()):
        return raw.split()
    out, i, bad = [], 0, []
    longest = table.max_symbol
    while i < len(raw):
        ch = raw[i]
        if ch in BOUNDARY_MARKS or ch == LENGTH_MARK:
            out.append(ch)
            i += 1
            continue
        for n in range(min(longest, len(raw) - i), 0, -1):
            if raw[i : i + n] in table.classes:
                out.append(raw[i : i + n])
                i += n
                break
        else:
            bad.append(ch)
            i += 1
    if bad:
        raise UnknownSegmentError(bad, raw)
    return out


def normalize(raw: str, table: SegmentTable) -> SegmentedForm:
    """Segment ``raw`` and collapse geminates.

    Space-separated input is taken as given segments; otherwise symbols are
    matched longest first.  '+' and '-' mark morpheme boundaries, the length
    mark is dropped, and identical adjacent segments inside one morpheme
    collapse to one.
    """
    if not raw or not raw.strip():
        raise ValueError("empty form")
    segs: list[str] = []
    bounds: list[int] = []
    bad = []
    for tok in _tokenize(raw.strip(), table):
        if tok in BOUNDARY_MARKS:
            bounds.append(len(segs))
            continue
        tok = tok.replace(LENGTH_MARK, "")
        if not tok:
            continue
        if tok not in table.classes:
            bad.append(tok)
            continue
        # runs collapse only inside one morpheme; vowels too, so that doubling
        # any segment leaves IC detection unchanged
        if segs and tok == segs[-1] and (not bounds or bounds[-1] != len(segs)):
            continue
        segs.append(tok)
    if bad:
        raise UnknownSegmentError(bad, raw)
    if not segs:
        raise ValueError(f"form {raw!r} has no segments")
    inner = sorted({k for k in bounds if 0 < k < len(segs)})
    return SegmentedForm(tuple(segs), tuple(inner))


def detect_ic(form: SegmentedForm, table: SegmentTable) -> bool:
    """True iff some C V C has identical consonants and no boundary inside it."""
    s = form.segments
    bset = set(form.boundaries)
    for i in range(len(s) - 2):
        if (
            s[i] == s[i + 2]
            and table.is_consonant(s[i])
            and table.is_vowel(s[i + 1])
            and (i + 1) not in bset
            and (i + 2) not in bset
        ):
            return True
    return False


def ic_state(form: SegmentedForm, table: SegmentTable) -> TraitState:
    return TraitState.PLUS_IC if detect_ic(form, table) else TraitState.MINUS_IC


# -- alignment ---------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentCosts:
    match: float = 0.0
    consonant_mismatch: float = 0.5
    mismatch: float = 1.0
    indel: float = 1.0

    def substitution(self, a: str, b: str, table: SegmentTable) -> float:
        if a == b:
            return self.match
        ca, cb = table.classes.get(a), table.classes.get(b)
        if ca is cb is SegmentClass.CONSONANT:
            return self.consonant_mismatch
        return self.mismatch


@dataclass(frozen=True)
class AlignedSpan:
    start: int
    end: int
    cost: float
    form: SegmentedForm


def _nw_last_row(a: Sequence[str], b: Sequence[str], table: SegmentTable, costs: AlignmentCosts) -> list[float]:
    """Global alignment cost of all of ``a`` against every prefix of ``b``."""
    n = len(b)
    prev = [j * costs.indel for j in range(n + 1)]
    for i in range(1, len(a) + 1):
        cur = [i * costs.indel] + [0.0] * n
        ai = a[i - 1]
        for j in range(1, n + 1):
            cur[j] = min(
                prev[j - 1] + costs.substitution(ai, b[j - 1], table),
                prev[j] + costs.indel,
                cur[j - 1] + costs.indel,
            )
        prev = cur
    return prev


def align_etymon(
    etymon: SegmentedForm,
    reflex: SegmentedForm,
    table: SegmentTable,
    costs: AlignmentCosts = AlignmentCosts(),
) -> AlignedSpan:
    """Contiguous reflex span with the cheapest global alignment to the etymon.

    End gaps on the reflex are free.  Ties go to the leftmost start, then the
    shortest span.
    """
    if not len(etymon) or not len(reflex):
        raise ValueError("align_etymon needs two nonempty forms")
    best = None
    r = reflex.segments
    for s in range(len(r)):
        row = _nw_last_row(etymon.segments, r[s:], table, costs)
        for length in range(1, len(r) - s + 1):
            key = (row[length], s, length)
            if best is None or key < best:
                best = key
    cost, s, length = best
    return AlignedSpan(s, s + length, cost, reflex.span(s, s + length))


# -- longest common subsequence ------------------------------------------------------

def _lcs_indices(a: Sequence[str], b: Sequence[str]) -> list[tuple[int, int]]:
    """Index pairs of an LCS; lexicographically smallest in ``a``, then ``b``."""
    n, m = len(a), len(b)
    L = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            L[i][j] = L[i + 1][j + 1] + 1 if a[i] == b[j] else max(L[i + 1][j], L[i][j + 1])
    out, i, j = [], 0, 0
    while L[i][j] > 0:
        need = L[i][j]
        found = False
        for i2 in range(i, n):
            for j2 in range(j, m):
                if a[i2] == b[j2] and L[i2 + 1][j2 + 1] == need - 1:
                    out.append((i2, j2))
                    i, j = i2 + 1, j2 + 1
                    found = True
                    break
            if found:
                break
    return out


def lcs_base(forms: Sequence[SegmentedForm]) -> SegmentedForm:
    """Longest common subsequence of related forms, folded left to right.

    Boundaries of the running base survive where they fall between two kept
    segments.
    """
    forms = list(forms)
    if len(forms) < 2:
        raise ValueError("lcs_base needs at least two forms")
    base = forms[0]
    for other in forms[1:]:
        pairs = _lcs_indices(base.segments, other.segments)
        if not pairs:
            raise UnrelatableFormsError(f"no common segments between {str(base)!r} and {str(other)!r}")
        picked = [i for i, _ in pairs]
        bounds = [t + 1 for t in range(len(picked) - 1) if any(picked[t] < k <= picked[t + 1] for k in base.boundaries)]
        base = SegmentedForm(tuple(base.segments[i] for i in picked), tuple(bounds))
    return base


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    return len(_lcs_indices(a, b))


# -- coding word lists ---------------------------------------------------------------

@dataclass(frozen=True)
class WordEntry:
    language: str
    cognate_id: str
    form: str
    # forms sharing a group are derivationally related and reduced to one base
    group: str | None = None
    concept: str | None = None
    line: int | None = None


def load_wordlist(path) -> list[WordEntry]:
    """TSV: language, cognate_id, form [, group] [, concept]."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = {"language", "cognate_id", "form"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, 2):
            lang, cog, form = (rec[k].strip() if rec[k] else "" for k in ("language", "cognate_id", "form"))
            if not lang or not cog or not form:
                raise ValueError(f"{path}:{lineno}: empty language, cognate_id or form")
            group = (rec.get("group") or "").strip() or None
            concept = (rec.get("concept") or "").strip() or None
            out.append(WordEntry(lang, cog, form, group, concept, lineno))
    return out


def load_etyma(path) -> dict[str, str]:
    """TSV: cognate_id, form.  A leading '*' on the form is dropped."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if not {"cognate_id", "form"} <= set(reader.fieldnames or []):
            raise ValueError(f"{path}: expected columns cognate_id, form")
        for lineno, rec in enumerate(reader, 2):
            cog = (rec["cognate_id"] or "").strip()
            form = (rec["form"] or "").strip().lstrip("*").strip()
            if not cog or not form:
                raise ValueError(f"{path}:{lineno}: empty cognate_id or form")
            out[cog] = form
    return out


def _where(entry: WordEntry) -> str:
    loc = f" (line {entry.line})" if entry.line else ""
    return f"{entry.language}/{entry.cognate_id}{loc}"


def reflex_bases(entries: Sequence[WordEntry], table: SegmentTable) -> list[SegmentedForm]:
    """Normalised reflexes; each derivational group collapses to its LCS base."""
    groups: dict[str, list[SegmentedForm]] = defaultdict(list)
    out = []
    for e in entries:
        try:
            form = normalize(e.form, table)
        except ValueError as exc:
            raise ValueError(f"{_where(e)}: {exc}") from None
        if e.group is None:
            out.append(form)
        else:
            groups[e.group].append(form)
    for g, forms in groups.items():
        out.append(forms[0] if len(forms) == 1 else lcs_base(forms))
    return out


def code_language(
    entries: Sequence[WordEntry],
    etyma: Mapping[str, str],
    table: SegmentTable,
    costs: AlignmentCosts = AlignmentCosts(),
) -> dict[str, tuple[int, int, int]]:
    """Row over (ABSENT, -IC, +IC) for every etymon, for one language.

    Reflexes are aligned to their etymon and the aligned span is tested for
    IC; a language may attest both states.  Etyma without reflexes are ABSENT.
    """
    by_cog: dict[str, list[WordEntry]] = defaultdict(list)
    for e in entries:
        if e.cognate_id not in etyma:
            raise ValueError(f"{_where(e)}: no etymon for cognate id {e.cognate_id!r}")
        by_cog[e.cognate_id].append(e)
    rows = {}
    for cog, raw in etyma.items():
        if cog not in by_cog:
            rows[cog] = (1, 0, 0)
            continue
        etymon = _etymon_form(raw, table, cog)
        row = [0, 0, 0]
        for base in reflex_bases(by_cog[cog], table):
            span = align_etymon(etymon, base, table, costs).form
            row[ic_state(span, table)] = 1
        rows[cog] = tuple(row)
    return rows


def _etymon_form(raw: str, table: SegmentTable, cog: str) -> SegmentedForm:
    try:
        return normalize(raw.lstrip("*"), table)
    except ValueError as exc:
        raise ValueError(f"etymon {cog}: {exc}") from None


@dataclass
class CodingResult:
    traits: list[TraitMatrix]
    skipped: list[tuple[str, str]] = field(default_factory=list)


def code_dataset(
    entries: Sequence[WordEntry],
    table: SegmentTable,
    etyma: Mapping[str, str] | None = None,
    costs: AlignmentCosts = AlignmentCosts(),
) -> CodingResult:
    """Trait matrices for a whole word list.

    With etyma: one cognate-class trait per etymon, reconstructed state from
    the etymon itself.  Without: entries must carry a concept and yield one
    cognate-concept trait per (concept, cognate id), coded on the whole form.
    """
    by_lang: dict[str, list[WordEntry]] = defaultdict(list)
    for e in entries:
        by_lang[e.language].append(e)
    skipped = []
    traits = []
    if etyma is not None:
        coded = {lang: code_language(es, etyma, table, costs) for lang, es in by_lang.items()}
        for cog, raw in etyma.items():
            rows = {lang: c[cog] for lang, c in coded.items() if c[cog] != (1, 0, 0)}
            if not rows:
                skipped.append((cog, "no reflexes"))
                continue
            recon = ic_state(_etymon_form(raw, table, cog), table)
            traits.append(TraitMatrix(cog, TraitKind.COGNATE_CLASS, rows, recon_state=recon))
        return CodingResult(traits, skipped)

    rows_by_trait: dict[tuple[str, str], dict[str, list[int]]] = defaultdict(dict)
    for lang, es in by_lang.items():
        keyed: dict[tuple[str, str], list[WordEntry]] = defaultdict(list)
        for e in es:
            if e.concept is None:
                raise ValueError(f"{_where(e)}: concept coding needs a concept column (or pass etyma)")
            keyed[(e.concept, e.cognate_id)].append(e)
        for key, group in keyed.items():
            row = rows_by_trait[key].setdefault(lang, [0, 0, 0])
            for base in reflex_bases(group, table):
                row[ic_state(base, table)] = 1
    for (concept, cog), rows in rows_by_trait.items():
        traits.append(TraitMatrix(f"{concept}:{cog}", TraitKind.COGNATE_CONCEPT, {k: tuple(v) for k, v in rows.items()}, concept_id=concept))
    return CodingResult(traits, skipped)

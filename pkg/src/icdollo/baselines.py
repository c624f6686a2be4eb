"""Neutral baselines for the birth and mutation ratios."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lexproc import SegmentedForm, SegmentTable, detect_ic

DEFAULT_ITERATIONS = 5000
MIN_ENTRIES = 500
SMOOTHING = 0.5


class BaselineKind(str, enum.Enum):
    BIRTH_INVENTORY = "birth_inventory"
    BIRTH_LEXICON = "birth_lexicon"
    MUTATION_SIM = "mutation_sim"


@dataclass
class BaselineReport:
    kind: BaselineKind
    values: dict[str, float]
    skipped: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = BaselineKind(self.kind)
        if not self.values:
            raise ValueError("baseline has no per-language values")
        v = np.array(list(self.values.values()), dtype=float)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("baseline values must be finite and > 0")

    @property
    def median(self) -> float:
        return float(np.median(list(self.values.values())))

    @property
    def min(self) -> float:
        return float(min(self.values.values()))

    @property
    def max(self) -> float:
        return float(max(self.values.values()))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "median": self.median,
            "min": self.min,
            "max": self.max,
            "values": self.values,
            "skipped": self.skipped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> BaselineReport:
        return cls(BaselineKind(d["kind"]), {k: float(v) for k, v in d["values"].items()}, dict(d.get("skipped", {})))


def load_consonant_counts(path) -> dict[str, int]:
    """TSV: language, count (header optional)."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not rec or not rec[0].strip() or rec[0].startswith("#"):
                continue
            if lineno == 1 and not rec[1].strip().lstrip("-").isdigit():
                continue
            try:
                out[rec[0].strip()] = int(rec[1])
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: expected language<TAB>integer count") from None
    return out


def inventory_birth_bound(consonant_counts: Mapping[str, int]) -> BaselineReport:
    """Upper bound S - 1 on the -IC:+IC birth ratio for S consonants.

    A random C_V_C frame matches its first consonant with probability 1/S,
    so -IC outnumbers +IC by (S - 1) to 1.
    """
    bad = {k: v for k, v in consonant_counts.items() if int(v) < 2}
    if bad:
        raise ValueError(f"consonant counts must be >= 2: {bad}")
    return BaselineReport(BaselineKind.BIRTH_INVENTORY, {k: float(int(v) - 1) for k, v in consonant_counts.items()})


def lexicon_birth_ratio(
    wordlist: Mapping[str, Sequence[SegmentedForm]], table: SegmentTable
) -> BaselineReport:
    """Per-language ratio of -IC forms to +IC forms.  Languages with no +IC
    form are skipped and listed in ``skipped``."""
    if not wordlist or not any(wordlist.values()):
        raise ValueError("empty word list")
    values, skipped = {}, {}
    for lang, forms in wordlist.items():
        n_plus = sum(detect_ic(f, table) for f in forms)
        n_minus = len(forms) - n_plus
        if n_plus == 0:
            skipped[lang] = "no +IC forms"
        elif n_minus == 0:
            skipped[lang] = "no -IC forms"
        else:
            values[lang] = n_minus / n_plus
    if not values:
        raise ValueError(f"no language has both -IC and +IC forms: {skipped}")
    return BaselineReport(BaselineKind.BIRTH_LEXICON, values, skipped)


# -- neutral sound change ---------------------------------------------------------------

UNCONDITIONED, INITIAL, MEDIAL = 0, 1, 2
DELETE = None


@dataclass(frozen=True)
class SoundChange:
    source: str
    target: str | None  # None deletes
    context: int  # UNCONDITIONED, INITIAL or MEDIAL


def apply_change(form: SegmentedForm, change: SoundChange, table: SegmentTable) -> SegmentedForm:
    """Rewrite matching positions, then collapse geminates within morphemes."""
    segs = list(form.segments)
    n = len(segs)
    if change.context == UNCONDITIONED:
        hit = [i for i in range(n) if segs[i] == change.source]
    elif change.context == INITIAL:
        hit = [0] if n and segs[0] == change.source else []
    else:
        hit = [i for i in range(1, n - 1) if segs[i] == change.source]
    if not hit:
        return form
    if change.target is not None:
        for i in hit:
            segs[i] = change.target
        new_segs, bounds = segs, list(form.boundaries)
    else:
        drop = set(hit)
        if len(drop) == n:
            return form  # a change cannot delete a whole word
        new_segs = [s for i, s in enumerate(segs) if i not in drop]
        bounds = sorted({k - sum(1 for i in drop if i < k) for k in form.boundaries})
    return _collapse(new_segs, bounds)


def _collapse(segs: list[str], bounds: list[int]) -> SegmentedForm:
    # same rule as normalisation: identical neighbours merge inside a morpheme
    out: list[str] = []
    bset = set(bounds)
    new_bounds = []
    for i, s in enumerate(segs):
        if i in bset and out:
            new_bounds.append(len(out))
        elif out and s == out[-1]:
            continue
        out.append(s)
    new_bounds = sorted({k for k in new_bounds if 0 < k < len(out)})
    return SegmentedForm(tuple(out), tuple(new_bounds))


def change_ratio(
    forms: Sequence[SegmentedForm],
    change: SoundChange,
    table: SegmentTable,
    smoothing: float = SMOOTHING,
    states=None,
    candidates=None,
) -> float:
    """(n(+IC -> -IC) + c) / (n(-IC -> +IC) + c) for one change over a lexicon.

    ``states`` (current IC flags) and ``candidates`` (indices of forms that
    contain the source segment) are optional precomputations.
    """
    if change.target == change.source:
        return 1.0
    if states is None:
        states = [detect_ic(f, table) for f in forms]
    if candidates is None:
        candidates = range(len(forms))
    lost = gained = 0
    for i in candidates:
        after = detect_ic(apply_change(forms[i], change, table), table)
        if states[i] and not after:
            lost += 1
        elif after and not states[i]:
            gained += 1
    return (lost + smoothing) / (gained + smoothing)


def _inventory(forms: Sequence[SegmentedForm], table: SegmentTable) -> list[str]:
    """Attested consonants and vowels in first-occurrence order, which makes
    draws invariant under relabelling of symbols."""
    segs = dict.fromkeys(s for f in forms for s in f.segments)
    return [s for s in segs if table.is_consonant(s) or table.is_vowel(s)]


def _draw_change(inventory: list[str], rng: np.random.Generator) -> SoundChange:
    source = inventory[rng.integers(len(inventory))]
    context = int(rng.integers(3))
    n_out = len(inventory) + (context != UNCONDITIONED)
    k = int(rng.integers(n_out))
    target = inventory[k] if k < len(inventory) else DELETE
    return SoundChange(source, target, context)


def simulate_language(
    forms: Sequence[SegmentedForm],
    table: SegmentTable,
    iterations: int = DEFAULT_ITERATIONS,
    rng: np.random.Generator | None = None,
    smoothing: float = SMOOTHING,
) -> float:
    """Mean over iterations of (n(+IC -> -IC) + c) / (n(-IC -> +IC) + c).

    Each iteration draws one change (segment, context, output) uniformly and
    applies it to the whole lexicon.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    inventory = _inventory(forms, table)
    if not inventory:
        raise ValueError("empty inventory")
    rng = rng if rng is not None else np.random.default_rng()
    state = np.array([detect_ic(f, table) for f in forms])
    # only forms containing the source can change
    by_seg: dict[str, list[int]] = {}
    for i, f in enumerate(forms):
        for s in set(f.segments):
            by_seg.setdefault(s, []).append(i)
    total = 0.0
    for _ in range(iterations):
        ch = _draw_change(inventory, rng)
        total += change_ratio(forms, ch, table, smoothing, state, by_seg.get(ch.source, ()))
    return total / iterations


def sound_change_sim(
    wordlist: Mapping[str, Sequence[SegmentedForm]],
    table: SegmentTable,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    min_entries: int = MIN_ENTRIES,
    smoothing: float = SMOOTHING,
    allow_list: set[str] | None = None,
) -> BaselineReport:
    """Neutral mutation-ratio baseline per language.

    Languages with fewer than ``min_entries`` forms are skipped.  For concept
    baselines pass the basic-vocabulary forms only and a suitable
    ``min_entries``.  ``allow_list`` restricts the languages considered.
    """
    langs = sorted(wordlist)
    seqs = np.random.SeedSequence(seed).spawn(len(langs))
    values, skipped = {}, {}
    for lang, ss in zip(langs, seqs):
        if allow_list is not None and lang not in allow_list:
            continue
        forms = list(wordlist[lang])
        if len(forms) < min_entries:
            skipped[lang] = f"{len(forms)} entries (needs >= {min_entries})"
            continue
        values[lang] = simulate_language(forms, table, iterations, np.random.default_rng(ss), smoothing)
    if not values:
        raise ValueError(f"no language qualifies for the sound-change simulation: {skipped}")
    return BaselineReport(BaselineKind.MUTATION_SIM, values, skipped)

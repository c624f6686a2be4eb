"""Forward simulation of trait data with exact (event-driven) CTM histories."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ctm
from .models import RATE_NAMES, RATIO_NAMES, GlobalParams, rate_ratios, stemmed_tree, varying_rates
from .phylo import Phylogeny, mrca, parse_newick
from .traits import TraitKind, TraitMatrix, TraitState, write_traits

REJECTION_CAP = 10**6
CLASS_SCHEMES = ("first_birth", "mrca_rejection")

ABSENT, MINUS, PLUS = int(TraitState.ABSENT), int(TraitState.MINUS_IC), int(TraitState.PLUS_IC)


class RatesTooLowError(RuntimeError):
    """Conditioning on an observed trait needed more than REJECTION_CAP draws."""


@dataclass(frozen=True)
class Event:
    branch: int  # child node id; the root id is the stem
    time: float  # distance below the top of the branch
    before: int
    after: int


@dataclass
class LatentHistory:
    node_states: np.ndarray  # state at the bottom of every branch
    events: list[Event]
    birth: Event | None = None
    mrca: int | None = None

    def events_on(self, branch: int) -> list[Event]:
        return [e for e in self.events if e.branch == branch]


@dataclass
class SimulatedTrait:
    trait: TraitMatrix | None  # None if no tip ended up present
    history: LatentHistory
    rates: np.ndarray
    attempts: int = 1


@dataclass
class SimConfig:
    kind: TraitKind
    truth: GlobalParams
    tree: Phylogeny
    n_traits: int = 200
    # concept models: traits are spread evenly over this many concepts
    n_concepts: int | None = None
    seed: int = 0
    condition_on_observed: bool = True
    stem_length: float | None = None
    # class traits only; see _simulate_class and _simulate_class_by_mrca
    class_scheme: str = "first_birth"

    def __post_init__(self):
        self.kind = TraitKind(self.kind)
        if self.class_scheme not in CLASS_SCHEMES:
            raise ValueError(f"class_scheme must be one of {CLASS_SCHEMES}")
        if self.n_traits < 1:
            raise ValueError("n_traits must be >= 1")
        if self.n_concepts is not None and not 1 <= self.n_concepts <= self.n_traits:
            raise ValueError("n_concepts must be in [1, n_traits]")
        if np.any(self.truth.sigma < 0):
            raise ValueError("sigma must be >= 0")

    @property
    def n_units(self) -> int:
        if self.kind is TraitKind.COGNATE_CONCEPT:
            return self.n_concepts or self.n_traits
        return self.n_traits

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> SimConfig:
        """Config keys: kind, log_means{rate}, sigma{rate}, tree (Newick text
        or a path), n_traits, n_concepts, seed, condition_on_observed, stem_length,
        class_scheme."""
        tree_src = d["tree"]
        if not tree_src.strip().endswith(";"):
            path = Path(tree_src)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            tree_src = path.read_text(encoding="utf-8").strip().splitlines()[0]
        return cls(
            kind=TraitKind.parse(d.get("kind", "class")),
            truth=GlobalParams.from_dict(d),
            tree=parse_newick(tree_src),
            n_traits=int(d.get("n_traits", 200)),
            n_concepts=d.get("n_concepts"),
            seed=int(d.get("seed", 0)),
            condition_on_observed=bool(d.get("condition_on_observed", True)),
            stem_length=d.get("stem_length"),
            class_scheme=d.get("class_scheme", "first_birth"),
        )

    @classmethod
    def load(cls, path) -> SimConfig:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)


# -- event simulation ------------------------------------------------------------

def _evolve(q: np.ndarray, state: int, length: float, branch: int, start: float, rng, events: list) -> int:
    """Gillespie run of generator ``q`` for ``length`` time units from ``state``."""
    t = 0.0
    while True:
        rate = -q[state, state]
        if rate <= 0.0:
            return state
        t += rng.exponential(1.0 / rate)
        if t >= length:
            return state
        w = q[state].copy()
        w[state] = 0.0
        new = int(rng.choice(3, p=w / rate))
        events.append(Event(branch, start + t, state, new))
        state = new


class _TreeArrays:
    def __init__(self, tree: Phylogeny):
        self.tree = tree
        order = tree.postorder()
        self.preorder = order[::-1]
        self.parent = [n.parent for n in tree.nodes]
        self.length = [n.length for n in tree.nodes]
        self.children = [n.children for n in tree.nodes]
        self.tip_items = sorted(tree.tips.items(), key=lambda kv: kv[1])
        top = {tree.root: 0.0}
        for i in self.preorder:
            if i != tree.root:
                top[i] = top[self.parent[i]] + self.length[self.parent[i]]
        self.top = [top[i] for i in range(len(tree.nodes))]

    def path_to(self, m: int) -> list[int]:
        """Branches from the top of the stem down to ``m``."""
        out = []
        while m >= 0:
            out.append(m)
            m = self.parent[m]
        return out[::-1]

    def subtree(self, i: int) -> list[int]:
        out, stack = [], [i]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(self.children[j])
        return out


def _tip_rows(arrays: _TreeArrays, states: np.ndarray) -> dict[str, tuple[int, int, int]]:
    rows = {}
    for label, i in arrays.tip_items:
        s = int(states[i])
        if s != ABSENT:
            row = [0, 0, 0]
            row[s] = 1
            rows[label] = tuple(row)
    return rows


def _simulate_concept(arrays: _TreeArrays, rates, rng) -> LatentHistory:
    (qc,), _ = ctm.generators(np.asarray(rates)[None, :], "concept")
    states = np.zeros(len(arrays.parent), dtype=np.int64)
    events: list[Event] = []
    for i in arrays.preorder:
        start = ABSENT if arrays.parent[i] < 0 else int(states[arrays.parent[i]])
        states[i] = _evolve(qc, start, arrays.length[i], i, 0.0, rng, events)
    return LatentHistory(states, events)


def _simulate_class(arrays: _TreeArrays, rates, rng) -> LatentHistory:
    """Single birth at the first arrival of the birth clocks, Q_nonbirth below.

    Every lineage still ABSENT runs a birth clock (rate lam_minus + lam_plus);
    the earliest arrival anywhere in the tree is the only birth.  Post-birth
    evolution is redrawn until no +-IC flip lies on a branch ancestral to the
    MRCA of present tips, so the born state stays frozen on birth loci.
    """
    lam_m, lam_p = rates[0], rates[1]
    (qn,) = ctm.generators(np.asarray(rates)[None, :], "class")[1]
    n = len(arrays.parent)
    b = lam_m + lam_p
    states = np.zeros(n, dtype=np.int64)
    if b <= 0.0:
        return LatentHistory(states, [])
    # memorylessness: one exponential per branch segment gives the first arrival
    waits = rng.exponential(1.0 / b, size=n)
    best, where = math.inf, -1
    for i in range(n):
        if waits[i] < arrays.length[i] and arrays.top[i] + waits[i] < best:
            best, where = arrays.top[i] + waits[i], i
    if where < 0:
        return LatentHistory(states, [])
    born = MINUS if rng.uniform() * b < lam_m else PLUS
    t_birth = float(waits[where])
    birth = Event(where, t_birth, ABSENT, born)
    below = set(arrays.subtree(where))
    order = [i for i in arrays.preorder if i in below and i != where]
    for _ in range(REJECTION_CAP):
        events: list[Event] = []
        states[:] = ABSENT
        states[where] = _evolve(qn, born, arrays.length[where] - t_birth, where, t_birth, rng, events)
        for i in order:
            states[i] = _evolve(qn, int(states[arrays.parent[i]]), arrays.length[i], i, 0.0, rng, events)
        present = [lab for lab, i in arrays.tip_items if states[i] != ABSENT]
        if not present:
            return LatentHistory(states.copy(), [birth] + events, birth, None)
        m = mrca(arrays.tree, present)
        locus = set(arrays.tree.ancestors(m))
        if not any(e.after != ABSENT and e.before != ABSENT and e.branch in locus for e in events):
            return LatentHistory(states.copy(), [birth] + events, birth, m)
    raise RatesTooLowError("could not draw a post-birth history with frozen birth loci")


def _simulate_class_by_mrca(arrays: _TreeArrays, rates, rng) -> LatentHistory | None:
    """One draw whose accepted patterns follow the pruning likelihood, or None.

    A candidate MRCA m is drawn uniformly from all nodes.  Birth happens on
    the path from the top of the stem to m and the born state is frozen down
    to m; off the path Q_nonbirth acts.  The draw is kept only if m is the
    MRCA of the present tips, so accepted (pattern, born state) pairs are
    proportional to the grafted pruning probability with one constant
    shared by all patterns.
    """
    lam_m, lam_p = rates[0], rates[1]
    (qn,) = ctm.generators(np.asarray(rates)[None, :], "class")[1]
    n = len(arrays.parent)
    b = lam_m + lam_p
    states = np.zeros(n, dtype=np.int64)
    if b <= 0.0:
        return LatentHistory(states, [])
    m = int(rng.integers(n))
    path = arrays.path_to(m)
    w = rng.exponential(1.0 / b)
    for k, j in enumerate(path):
        if w < arrays.length[j]:
            break
        w -= arrays.length[j]
    else:
        return LatentHistory(states, [])
    born = MINUS if rng.uniform() * b < lam_m else PLUS
    birth = Event(j, float(w), ABSENT, born)
    events: list[Event] = []
    frozen = path[k:]
    on_path = set(frozen)
    for v in frozen:
        states[v] = born
    for v in frozen:
        for c in arrays.children[v]:
            if c in on_path:
                continue
            for i in arrays.subtree(c):
                states[i] = _evolve(qn, int(states[arrays.parent[i]]), arrays.length[i], i, 0.0, rng, events)
    present = [lab for lab, i in arrays.tip_items if states[i] != ABSENT]
    if not present:
        return LatentHistory(states, [birth] + events, birth, None)
    if mrca(arrays.tree, present) != m:
        return None
    return LatentHistory(states, [birth] + events, birth, m)


def _trait_rates(config: SimConfig, offsets: np.ndarray) -> np.ndarray:
    return np.exp(config.truth.log_means + offsets * varying_rates(config.kind))


def simulate_trait(
    config: SimConfig,
    rng: np.random.Generator | None = None,
    offsets: np.ndarray | None = None,
    trait_id: str = "t0",
    concept_id: str | None = None,
    rates: np.ndarray | None = None,
) -> SimulatedTrait:
    """One trait and its latent history.

    ``rates`` (six values, RATE_NAMES order) overrides the config's true
    globals; otherwise ``offsets`` (log scale) are added to them.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if rates is None:
        rates = _trait_rates(config, np.zeros(6) if offsets is None else np.asarray(offsets, dtype=float))
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ValueError("rates must be finite and >= 0")
    arrays = _TreeArrays(stemmed_tree(config.tree, config.stem_length))
    if config.kind is TraitKind.COGNATE_CONCEPT:
        simulate = _simulate_concept
    else:
        simulate = _simulate_class if config.class_scheme == "first_birth" else _simulate_class_by_mrca
    if config.kind is TraitKind.COGNATE_CONCEPT and concept_id is None:
        concept_id = "c0"

    # nothing leaves ABSENT without a birth rate, so conditioning cannot succeed
    if config.condition_on_observed and rates[0] + rates[1] <= 0.0:
        raise RatesTooLowError("both birth rates are zero; no trait can be observed")
    attempts = 0
    while True:
        attempts += 1
        hist = simulate(arrays, rates, rng)
        if hist is not None:
            rows = _tip_rows(arrays, hist.node_states)
            if rows or not config.condition_on_observed:
                break
        if attempts >= REJECTION_CAP:
            raise RatesTooLowError(f"no observed trait after {REJECTION_CAP} draws; rates too low for this tree")
    trait = None
    if rows:
        if config.kind is TraitKind.COGNATE_CLASS:
            trait = TraitMatrix(trait_id, config.kind, rows, recon_state=TraitState(hist.birth.after))
        else:
            trait = TraitMatrix(trait_id, config.kind, rows, concept_id=concept_id)
    return SimulatedTrait(trait, hist, rates, attempts)


# -- datasets ------------------------------------------------------------------------

@dataclass
class SimulatedDataset:
    config: SimConfig
    traits: list[TraitMatrix]
    histories: list[LatentHistory]
    unit_ids: list[str]
    unit_log_rates: np.ndarray  # (U, 6)
    trait_unit: list[int] = field(default_factory=list)

    def truth(self) -> dict:
        g = self.config.truth
        per_unit = {
            u: {
                "log_rates": dict(zip(RATE_NAMES, map(float, lr))),
                "ratios": dict(zip(RATIO_NAMES, rate_ratios(lr))),
            }
            for u, lr in zip(self.unit_ids, self.unit_log_rates)
        }
        return {
            "kind": self.config.kind.value,
            "seed": self.config.seed,
            "class_scheme": self.config.class_scheme,
            "n_traits": len(self.traits),
            "tree": self.config.tree.to_newick(),
            **g.to_dict(),
            "ratios": dict(zip(RATIO_NAMES, rate_ratios(g))),
            "units": per_unit,
        }


def simulate_dataset(config: SimConfig) -> SimulatedDataset:
    """Per-unit offsets ~ N(0, sigma) on the varying rates, then one trait per
    draw.  Every trait has its own seeded sub-stream.  Without conditioning,
    traits that end up absent everywhere are dropped."""
    root = np.random.SeedSequence(config.seed)
    unit_seq, *trait_seqs = root.spawn(config.n_traits + 1)
    unit_rng = np.random.default_rng(unit_seq)
    vary = varying_rates(config.kind)
    n_units = config.n_units
    offsets = unit_rng.normal(0.0, 1.0, (n_units, 6)) * config.truth.sigma * vary
    unit_log_rates = config.truth.log_means + offsets

    if config.kind is TraitKind.COGNATE_CONCEPT:
        unit_ids = [f"c{j:03d}" for j in range(n_units)]
        trait_unit = [k * n_units // config.n_traits for k in range(config.n_traits)]
    else:
        unit_ids = [f"t{k:04d}" for k in range(config.n_traits)]
        trait_unit = list(range(config.n_traits))

    traits, histories, kept_units = [], [], []
    for k in range(config.n_traits):
        u = trait_unit[k]
        tid = unit_ids[u] if config.kind is TraitKind.COGNATE_CLASS else f"{unit_ids[u]}_{k:04d}"
        sim = simulate_trait(
            config,
            np.random.default_rng(trait_seqs[k]),
            offsets=offsets[u],
            trait_id=tid,
            concept_id=unit_ids[u] if config.kind is TraitKind.COGNATE_CONCEPT else None,
        )
        histories.append(sim.history)
        if sim.trait is not None:
            traits.append(sim.trait)
            kept_units.append(u)
    return SimulatedDataset(config, traits, histories, unit_ids, unit_log_rates, kept_units)


def write_dataset(ds: SimulatedDataset, out_dir, stem: str = "sim") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traits_path = out / f"{stem}_traits.tsv"
    truth_path = out / f"{stem}_truth.json"
    write_traits(ds.traits, traits_path)
    truth_path.write_text(json.dumps(ds.truth(), indent=2) + "\n", encoding="utf-8")
    return traits_path, truth_path


# -- history checks ------------------------------------------------------------------

def dollo_violations(tree: Phylogeny, history: LatentHistory) -> list[str]:
    """Ways a class-trait history breaks the single-birth structure.

    Checks: at most one birth; no birth below a loss on the same lineage;
    no +-IC flip on a birth locus (MRCA of present tips and its ancestors)
    below the birth point.
    """
    problems = []
    births = [e for e in history.events if e.before == ABSENT and e.after != ABSENT]
    if len(births) > 1:
        problems.append(f"{len(births)} births")
    losses = [e for e in history.events if e.after == ABSENT]
    for b in births:
        lineage = set(tree.ancestors(b.branch))
        for loss in losses:
            if loss.branch in lineage and (loss.branch != b.branch or loss.time < b.time):
                problems.append(f"rebirth on branch {b.branch} after loss on branch {loss.branch}")
    present = [lab for lab, i in tree.tips.items() if history.node_states[i] != ABSENT]
    if present:
        locus = set(tree.ancestors(mrca(tree, present)))
        for e in history.events:
            if e.before != ABSENT and e.after != ABSENT and e.branch in locus:
                problems.append(f"state flip on birth locus {e.branch}")
    return problems

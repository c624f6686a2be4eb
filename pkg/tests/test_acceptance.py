"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated
in an "acceptance criteria" section at the end of the session.  The two
recovery checks take several minutes each on one core.
"""

import itertools
import math
import time

import numpy as np
import pytest

from icdollo import ctm
from icdollo.baselines import DEFAULT_ITERATIONS, MIN_ENTRIES, inventory_birth_bound, sound_change_sim
from icdollo.cli import RunConfig
from icdollo.inference import (
    ChainConfig,
    ChainResult,
    check_convergence,
    hdi,
    pairwise_contrasts,
    pool,
    psrf,
    run_tree,
    summarize,
)
from icdollo.lexproc import SegmentedForm, UnrelatableFormsError, detect_ic, lcs_base, normalize
from icdollo.models import GlobalParams, ModelSpec, stemmed_tree
from icdollo.phylo import classify_branches, graft_reconstruction_tip, parse_newick
from icdollo.sim import SimConfig, dollo_violations, simulate_dataset, simulate_trait

from conftest import balanced_newick
from oracles import enumerate_likelihood, is_subsequence, lcs_length_dp, random_tree_newick

ABSENT = 0
ROWS = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 1, 1), (1, 1, 0), (1, 0, 1), (1, 1, 1)]


# -- 1 ------------------------------------------------------------------------------

def _instance(rng, k):
    tree = parse_newick(random_tree_newick(rng, int(rng.integers(2, 6)), stem=float(rng.uniform(0, 1))))
    labels = list(tree.tips)
    rows = {lab: ROWS[rng.integers(len(ROWS))] for lab in labels}
    r = rng.uniform(0, 3, 6)
    if k % 3 == 2:
        q = ctm.build_q_concept(*r)
        return tree, rows, None, q, q
    present = [lab for lab, row in rows.items() if row[1] or row[2]] or labels[:1]
    cls = classify_branches(tree, present)
    if k % 3 == 1:
        tree, _ = graft_reconstruction_tip(tree, cls.mrca, int(rng.integers(1, 3)))
    return tree, rows, cls, ctm.build_q_birth(*r[:2]), ctm.build_q_nonbirth(*r[2:])


def test_pruning_matches_enumeration(verdict):
    rng = np.random.default_rng(101)
    worst, elapsed = 0.0, 0.0
    for k in range(200):
        tree, rows, cls, qb, qn = _instance(rng, k)
        t0 = time.perf_counter()
        ll = ctm.prune_log_likelihood(tree, rows, qb, qn, cls)
        elapsed += time.perf_counter() - t0
        want = enumerate_likelihood(tree, rows, qb, qn, cls.birth if cls else frozenset())
        err = (0.0 if ll == -math.inf else math.inf) if want == 0.0 else abs(ll - math.log(want))
        worst = max(worst, err)
    verdict("1 pruning vs enumeration", worst < 1e-10 and elapsed < 5.0,
            f"200 instances, max |dlogL| = {worst:.2e}, pruning time {elapsed:.2f} s")


# -- 2 ------------------------------------------------------------------------------

def _generator(rng, i):
    r = rng.uniform(0, 3, 6)
    return (ctm.build_q_birth(*r[:2]), ctm.build_q_nonbirth(*r[2:]), ctm.build_q_concept(*r))[i % 3]


def test_matrix_exponential_properties(verdict):
    rng = np.random.default_rng(202)
    rows = semi = 0.0
    identity = absorbing = True
    for i in range(1000):
        q = _generator(rng, i)
        s, t = rng.uniform(0, 3, 2)
        rows = max(rows, np.abs(ctm.expm(q, t).sum(axis=1) - 1).max())
        semi = max(semi, np.abs(ctm.expm(q, s + t) - ctm.expm(q, s) @ ctm.expm(q, t)).max())
        identity &= np.array_equal(ctm.expm(q, 0.0), np.eye(3))
        qn = ctm.build_q_nonbirth(*rng.uniform(0, 3, 4))
        absorbing &= np.array_equal(ctm.expm(qn, float(rng.uniform(0, 10)))[ABSENT], [1.0, 0.0, 0.0])
    ok = rows < 1e-9 and semi < 1e-8 and identity and absorbing
    verdict("2 matrix exponential", ok,
            f"row sums {rows:.1e}, semigroup {semi:.1e}, P(0)=I {identity}, ABSENT absorbing {absorbing}")


# -- 3 ------------------------------------------------------------------------------

def _replay_problems(tree, history):
    """Walk every root-to-tip lineage through its events in time order.

    Independent of the package checker: a lineage may leave ABSENT once,
    never return from ABSENT, and may not change +-IC while on a branch
    ancestral to the MRCA of present tips.
    """
    by_branch = {}
    for e in history.events:
        by_branch.setdefault(e.branch, []).append(e)
    births = sum(e.before == ABSENT for e in history.events)
    if births != 1:
        return [f"{births} births"]
    present = [i for i in tree.tips.values() if history.node_states[i] != ABSENT]
    locus = set.intersection(*(set(tree.ancestors(i)) for i in present)) if present else set()
    problems = []
    for tip in tree.tips.values():
        state, was_alive = ABSENT, False
        for b in reversed(tree.ancestors(tip)):
            for e in sorted(by_branch.get(b, []), key=lambda e: e.time):
                if e.before != state:
                    problems.append(f"event on {b} starts from {e.before}, lineage is in {state}")
                if e.before == ABSENT and was_alive:
                    problems.append(f"rebirth on {b}")
                if ABSENT not in (e.before, e.after) and b in locus:
                    problems.append(f"flip on birth locus {b}")
                state, was_alive = e.after, was_alive or e.after != ABSENT
            if state != history.node_states[b]:
                problems.append(f"node {b} recorded {history.node_states[b]}, replay gives {state}")
    return problems


@pytest.mark.slow
def test_dollo_structure(verdict):
    config = SimConfig("class", GlobalParams(np.log([0.6, 0.4, 0.8, 0.8, 0.7, 0.7]), np.zeros(6)),
                       parse_newick(balanced_newick(3)))
    tree = stemmed_tree(config.tree)
    rng = np.random.default_rng(303)
    n, bad, example = 100_000, 0, ""
    for _ in range(n):
        h = simulate_trait(config, rng).history
        problems = _replay_problems(tree, h) + dollo_violations(tree, h)
        if problems:
            bad += 1
            example = example or problems[0]
    verdict("3 Dollo structure", bad == 0, f"{n} class traits on 8 tips, {bad} with violations {example}")


# -- 4 ------------------------------------------------------------------------------

def test_ascertainment_correction(verdict):
    tree = parse_newick("(A:0.7,B:1.3):0.5;")
    rng = np.random.default_rng(404)
    r = rng.uniform(0.2, 3, 6)
    qc = ctm.build_q_concept(*r)
    # class generators with the birth partition held fixed at the joint MRCA
    fixed = classify_branches(tree, ["A", "B"])
    cases = {"concept": (qc, qc, None), "class": (ctm.build_q_birth(*r[:2]), ctm.build_q_nonbirth(*r[2:]), fixed)}
    sums = {}
    for name, (qb, qn, cls) in cases.items():
        p0 = ctm.all_absent_probability(tree, qb, qn, cls)
        total = 0.0
        for a, b in itertools.product(range(3), repeat=2):
            if a == b == ABSENT:
                continue
            rows = {"A": np.eye(3)[a], "B": np.eye(3)[b]}
            total += ctm.ascertainment_correct(math.exp(ctm.prune_log_likelihood(tree, rows, qb, qn, cls)), p0)
        sums[name] = total
    ok = all(abs(s - 1) < 1e-9 for s in sums.values())
    verdict("4 ascertainment correction", ok, ", ".join(f"{k} sum-1 = {v - 1:.1e}" for k, v in sums.items()))


# -- 5 ------------------------------------------------------------------------------

TRUE_LOG_MEANS = np.log([1.0, 0.1, 0.2, 0.6, 0.5, 0.5])  # birth 10, mutation 3, loss 1


def _class_recovery(tree16, rho_rule):
    g = GlobalParams(TRUE_LOG_MEANS, np.array([0, 0, 0.3, 0.3, 0.3, 0.3]))
    ds = simulate_dataset(SimConfig("class", g, tree16, n_traits=300, seed=1))
    t0 = time.perf_counter()
    run = run_tree(ModelSpec("class", ds.traits, tree16, rho_rule=rho_rule), ChainConfig(seed=1))
    elapsed = time.perf_counter() - t0
    report = summarize(pool([run]))
    truth = ds.truth()["ratios"]
    cover = {k: s.hdi_low <= truth[k] <= s.hdi_high for k, s in report.ratios.items()}
    loss = report.ratios["loss"]
    worst = max(run.psrf.values())
    ok = all(cover.values()) and loss.hdi_low <= 1 <= loss.hdi_high and worst < 1.1 and elapsed < 900
    intervals = ", ".join(f"{k} {truth[k]:.3g} in [{s.hdi_low:.2f}, {s.hdi_high:.2f}]" for k, s in report.ratios.items())
    return ok, f"{intervals}; max PSRF {worst:.3f}; {elapsed:.0f} s"


@pytest.mark.slow
def test_class_recovery(verdict, tree16):
    # the simulator gives every trait mutation rates, so the matching model does too
    verdict("5a class recovery", *_class_recovery(tree16, "all"))


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="attested-state rule drops mutation rates the simulator used; mutation ratio biased low")
def test_class_recovery_attested_rule(verdict, tree16):
    verdict("5a class recovery, attested-state rule", *_class_recovery(tree16, "attested"))


@pytest.mark.slow
def test_concept_recovery(verdict, tree16):
    g = GlobalParams(TRUE_LOG_MEANS, np.full(6, 0.5))
    ds = simulate_dataset(SimConfig("concept", g, tree16, n_traits=300, n_concepts=20, seed=1))
    spec = ModelSpec("concept", ds.traits, tree16)
    t0 = time.perf_counter()
    run = run_tree(spec, ChainConfig(seed=1))
    elapsed = time.perf_counter() - t0
    per_unit = pool([run]).unit_ratios()
    truth = ds.truth()["units"]
    covered = 0
    for j, unit in enumerate(spec.units):
        lo, hi = hdi(per_unit[:, j, 2])
        covered += lo <= truth[unit]["ratios"]["loss"] <= hi
    worst = max(run.psrf.values())
    ok = covered >= 17 and worst < 1.1
    verdict("5b concept recovery", ok, f"loss HDI covers {covered}/{spec.n_units} concepts; max PSRF {worst:.3f}; {elapsed:.0f} s")


# -- 6 ------------------------------------------------------------------------------

def _uniform_words(rng, s, n, frames):
    """-IC:+IC ratio of n words C(VC)^frames over s equiprobable consonants."""
    cons = rng.integers(s, size=(n, frames + 1))
    plus = np.any(cons[:, 1:] == cons[:, :-1], axis=1).sum()
    return (n - plus) / plus, plus


def test_baseline_constants(verdict, table):
    counts = {f"L{s}": s for s in range(2, 120)}
    exact = inventory_birth_bound(counts).values == {f"L{s}": float(s - 1) for s in range(2, 120)}
    rng = np.random.default_rng(606)
    notes, bound_ok = [], True
    for s in (5, 20, 50):
        one, plus = _uniform_words(rng, s, 10**6, 1)
        longer, _ = _uniform_words(rng, s, 10**6, 3)
        # one frame sits on the bound up to binomial noise; more frames fall below it
        se = (s - 1) * math.sqrt((1 - 1 / s) / plus)
        bound_ok &= one <= s - 1 + 4 * se and longer < s - 1
        notes.append(f"S={s}: {one:.2f} / {longer:.2f}")
    # the vectorised frame count agrees with the package detector on CVC words
    cons = table.consonants()[:5]
    sample = rng.integers(5, size=(2000, 2))
    agree = all(detect_ic(SegmentedForm((cons[a], "a", cons[b])), table) == (a == b) for a, b in sample)
    small = {"L": [normalize("t a k a", table)] * (MIN_ENTRIES - 1)}
    gated = not sound_change_sim(small, table, iterations=1, min_entries=MIN_ENTRIES - 1).skipped
    gated &= "L" in sound_change_sim({"L": small["L"], "M": small["L"] * 2}, table, iterations=1).skipped
    ok = exact and bound_ok and agree and DEFAULT_ITERATIONS == 5000 and MIN_ENTRIES == 500 and gated
    verdict("6 baseline constants", ok,
            f"S-1 exact {exact}; ratios 1 frame / 3 frames {'; '.join(notes)}; "
            f"iterations {DEFAULT_ITERATIONS}, min entries {MIN_ENTRIES}")


# -- 7 ------------------------------------------------------------------------------

def test_summaries(verdict):
    rng = np.random.default_rng(707)
    lo, hi = hdi(rng.normal(size=10**6))
    same = psrf(np.tile(rng.normal(size=2 * 10**6), (4, 1)))
    apart = psrf(np.stack([rng.normal(0, 1, 2000), rng.normal(10, 1, 2000)]))
    cfg, trees = ChainConfig(), RunConfig().trees
    runs = []
    for tree_id in range(trees):
        chains = [
            ChainResult(c, np.arange(cfg.n_burn, cfg.iterations), rng.normal(size=(cfg.n_retained, 6)), np.ones((cfg.n_retained, 6)))
            for c in range(cfg.chains)
        ]
        runs.append(check_convergence(tree_id, chains))
    n = len(pool(runs))
    ok = abs(lo + 1.96) <= 0.02 and abs(hi - 1.96) <= 0.02 and abs(same - 1) <= 1e-6 and apart > 3 and n == 100_000
    verdict("7 summaries", ok,
            f"HDI [{lo:.3f}, {hi:.3f}]; psrf identical {same:.8f}, separated {apart:.1f}; pooled {n} draws")


# -- 8 ------------------------------------------------------------------------------

def test_coding_golden(verdict, table):
    judged = {"d e d e k": True, "b i b e t": True, "b a + b a": False, "b a - b a": False, "t a + t a": False}
    wrong = [f for f, want in judged.items() if detect_ic(normalize(f, table), table) is not want]
    geminates = {"t a t t a": ("t", "a", "t", "a"), "d e kː e": ("d", "e", "k", "e"), "b a t + t a": ("b", "a", "t", "t", "a")}
    wrong += [f for f, want in geminates.items() if normalize(f, table).segments != want]
    rng = np.random.default_rng(808)
    mismatched = 0
    for _ in range(1000):
        a, b = (tuple(rng.choice(list("tkaim"), int(rng.integers(1, 13)))) for _ in range(2))
        want = lcs_length_dp(a, b)
        try:
            base = lcs_base([SegmentedForm(a), SegmentedForm(b)]).segments
        except UnrelatableFormsError:
            base = ()
        mismatched += len(base) != want or not (is_subsequence(base, a) and is_subsequence(base, b))
    verdict("8 coding golden tests", not wrong and mismatched == 0,
            f"judgement/geminate mismatches {wrong or 'none'}; LCS mismatches {mismatched}/1000")


# -- 9 ------------------------------------------------------------------------------

def test_contrasts(verdict):
    rng = np.random.default_rng(909)
    draws = {"x": rng.integers(0, 4, 400).astype(float), "y": rng.integers(0, 5, 400).astype(float), "z": rng.normal(size=400)}
    m = pairwise_contrasts(draws)
    exact = True
    for (i, a), (j, b) in itertools.permutations(enumerate(m.concepts), 2):
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in zip(draws[a], draws[b]))
        # percentages come from means; counts are multiples of 1/2
        exact &= abs(m.percent[i, j] * 400 / 100 - wins) < 1e-9
    # 19 wins in 20 paired draws is exactly 95 percent
    edge = {"a": np.r_[np.ones(19), 0.0], "b": np.r_[np.zeros(19), 1.0]}
    below = {"a": np.r_[np.ones(18), 0.0, 0.5], "b": np.r_[np.zeros(18), 1.0, 0.5]}
    fires = bool(pairwise_contrasts(edge).decisive[0, 1]) and not pairwise_contrasts(below).decisive[0, 1]
    verdict("9 pairwise contrasts", exact and fires, f"brute-force equality {exact}; fires at 95.0 and not at 92.5: {fires}")

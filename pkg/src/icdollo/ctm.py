"""Continuous-time Markov machinery for 3-state IC traits.

State order is (ABSENT, -IC, +IC).  Rate matrices are plain 3x3 float
arrays whose rows sum to zero.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .phylo import BranchClassification, Phylogeny
from .traits import TraitMatrix, TraitState

ABSENT_ROOT = np.array([1.0, 0.0, 0.0])


class ImpossibleDataError(ValueError):
    """Trait data has zero probability under the given rates."""


class DegenerateModelError(ValueError):
    """The all-absent pattern carries (numerically) all probability mass."""


def _rates(*rates: float) -> list[float]:
    out = [float(r) for r in rates]
    for r in out:
        if not r >= 0.0 or math.isinf(r):
            raise ValueError(f"rates must be finite and >= 0, got {rates}")
    return out


def _fill_diagonal(q: np.ndarray) -> np.ndarray:
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def build_q_birth(lam_minus: float, lam_plus: float) -> np.ndarray:
    """Generator on birth loci: ABSENT -> +/-IC only, born states frozen."""
    lm, lp = _rates(lam_minus, lam_plus)
    q = np.zeros((3, 3))
    q[0, 1], q[0, 2] = lm, lp
    return _fill_diagonal(q)


def build_q_nonbirth(mu_minus: float, mu_plus: float, rho_mp: float, rho_pm: float) -> np.ndarray:
    """Generator off birth loci: losses and +/-IC mutation, ABSENT absorbing."""
    mm, mp, rmp, rpm = _rates(mu_minus, mu_plus, rho_mp, rho_pm)
    q = np.zeros((3, 3))
    q[1, 0], q[1, 2] = mm, rmp
    q[2, 0], q[2, 1] = mp, rpm
    return _fill_diagonal(q)


def build_q_concept(
    lam_minus: float, lam_plus: float, mu_minus: float, mu_plus: float, rho_mp: float, rho_pm: float
) -> np.ndarray:
    """Homoplastic generator with all six transitions."""
    lm, lp, mm, mp, rmp, rpm = _rates(lam_minus, lam_plus, mu_minus, mu_plus, rho_mp, rho_pm)
    q = np.array([[0.0, lm, lp], [mm, 0.0, rmp], [mp, rpm, 0.0]])
    return _fill_diagonal(q)


# -- matrix exponential ------------------------------------------------------

@numba.njit(cache=True)
def _expm3_raw(q, t, out, work):
    """exp(q t) for a 3x3 generator by scaling and squaring a Taylor series.

    ``work`` is a (3, 3, 3) scratch buffer.  Terms are summed until the
    largest increment drops below 1e-16.
    """
    if t == 0.0:
        for i in range(3):
            for j in range(3):
                out[i, j] = 1.0 if i == j else 0.0
        return
    nrm = 0.0
    for i in range(3):
        r = 0.0
        for j in range(3):
            r += abs(q[i, j])
        if r > nrm:
            nrm = r
    nrm *= t
    s = 0
    while nrm > 0.5:
        nrm *= 0.5
        s += 1
    scale = t / (2.0 ** s)
    a = work[0]
    term = work[1]
    tmp = work[2]
    for i in range(3):
        for j in range(3):
            a[i, j] = q[i, j] * scale
            term[i, j] = 1.0 if i == j else 0.0
            out[i, j] = term[i, j]
    for k in range(1, 60):
        big = 0.0
        for i in range(3):
            for j in range(3):
                tmp[i, j] = (term[i, 0] * a[0, j] + term[i, 1] * a[1, j] + term[i, 2] * a[2, j]) / k
        for i in range(3):
            for j in range(3):
                term[i, j] = tmp[i, j]
                out[i, j] += tmp[i, j]
                if abs(tmp[i, j]) > big:
                    big = abs(tmp[i, j])
        if big < 1e-16:
            break
    for _ in range(s):
        for i in range(3):
            for j in range(3):
                tmp[i, j] = out[i, 0] * out[0, j] + out[i, 1] * out[1, j] + out[i, 2] * out[2, j]
        for i in range(3):
            for j in range(3):
                out[i, j] = tmp[i, j]


@numba.njit(cache=True)
def _normalise_rows(p):
    for i in range(3):
        tot = 0.0
        for j in range(3):
            if p[i, j] < 0.0:
                p[i, j] = 0.0
            tot += p[i, j]
        for j in range(3):
            p[i, j] /= tot


@numba.njit(cache=True)
def _expm3(q, t, out, work):
    _expm3_raw(q, t, out, work)
    if t != 0.0:
        _normalise_rows(out)


def expm(q: np.ndarray, t: float) -> np.ndarray:
    """Transition matrix exp(q t); exactly the identity at t == 0."""
    t = float(t)
    if not (t >= 0.0) or math.isinf(t):
        raise ValueError(f"elapsed time must be finite and >= 0, got {t}")
    q = np.ascontiguousarray(q, dtype=float)
    if q.shape != (3, 3):
        raise ValueError("expected a 3x3 generator")
    out = np.empty((3, 3))
    _expm3_raw(q, t, out, np.empty((3, 3, 3)))
    if t != 0.0:
        if np.any(np.abs(out.sum(axis=1) - 1.0) > 1e-9):
            raise FloatingPointError("matrix exponential lost probability mass")
        _normalise_rows(out)
    return out


# -- pruning ----------------------------------------------------------------

def _indicator(state: int) -> np.ndarray:
    v = np.zeros(3)
    v[int(state)] = 1.0
    return v


def prune_log_likelihood(
    tree: Phylogeny,
    rows,
    q_birth: np.ndarray,
    q_nonbirth: np.ndarray,
    classification: BranchClassification | None = None,
    root: np.ndarray | None = None,
) -> float:
    """Log P(rows | tree, generators) by Felsenstein pruning.

    ``rows`` maps tip label -> length-3 likelihood row; unlisted tips are
    ABSENT.  Nodes in ``tree.fixed`` get an indicator row.  Branches in
    ``classification.birth`` evolve under ``q_birth``, all others under
    ``q_nonbirth`` (with no classification every branch uses ``q_nonbirth``).
    The root prior sits at the top of the stem.
    """
    root = ABSENT_ROOT if root is None else np.asarray(root, dtype=float)
    birth = classification.birth if classification is not None else frozenset()
    n = len(tree.nodes)
    partial = np.ones((n, 3))
    data_node = {i: lab for lab, i in tree.tips.items()}
    log_scale = 0.0
    for i in tree.postorder():
        if i in data_node:
            partial[i] *= np.asarray(rows.get(data_node[i], (1, 0, 0)), dtype=float)
        if i in tree.fixed:
            partial[i] *= _indicator(tree.fixed[i])
        m = partial[i].max()
        if m <= 0.0:
            return -math.inf
        partial[i] /= m
        log_scale += math.log(m)
        node = tree.nodes[i]
        p = expm(q_birth if i in birth else q_nonbirth, node.length)
        msg = p @ partial[i]
        if node.parent >= 0:
            partial[node.parent] *= msg
        else:
            value = float(root @ msg)
            return -math.inf if value <= 0.0 else math.log(value) + log_scale
    raise AssertionError("postorder did not end at the root")


def prune_likelihood(
    trait: TraitMatrix,
    tree: Phylogeny,
    classification: BranchClassification | None,
    q_birth: np.ndarray,
    q_nonbirth: np.ndarray,
    root: np.ndarray | None = None,
) -> float:
    """P(x_d | tree, Q) for one trait; raises if the probability is zero."""
    for label in trait.rows:
        tree.tip_node(label)
    ll = prune_log_likelihood(tree, trait.rows, q_birth, q_nonbirth, classification, root)
    if ll == -math.inf:
        raise ImpossibleDataError(f"trait {trait.trait_id} has zero likelihood")
    return math.exp(ll)


def all_absent_probability(
    tree: Phylogeny,
    q_birth: np.ndarray,
    q_nonbirth: np.ndarray,
    classification: BranchClassification | None = None,
    root: np.ndarray | None = None,
) -> float:
    """Probability that every data tip is ABSENT (fixed/grafted tips kept as they are)."""
    rows = {label: (1, 0, 0) for label in tree.tips}
    return math.exp(prune_log_likelihood(tree, rows, q_birth, q_nonbirth, classification, root))


def ascertainment_correct(raw: float, p_all_absent: float) -> float:
    """Condition a trait likelihood on the trait being observed at all."""
    if not 0.0 <= p_all_absent:
        raise ValueError("p_all_absent must be >= 0")
    if p_all_absent >= 1.0 - 1e-12:
        raise DegenerateModelError(f"P(all absent) = {p_all_absent!r}; model cannot produce observable traits")
    return raw / (1.0 - p_all_absent)


# -- batched kernel ---------------------------------------------------------

@numba.njit(cache=True)
def prune_batch(postorder, parent, lengths, birth, q_birth, q_nonbirth, data, absent, prior):
    """Pruning for many traits on one tree topology.

    birth: (D, N) bool branch classes; q_*: (D, 3, 3); data/absent: (D, N, 3)
    node rows for the observed and the all-absent pattern (internal nodes
    all ones, grafted indicator folded in).  Both patterns share transition
    matrices.  Returns two (D,) arrays of log-likelihoods.
    """
    n_traits = data.shape[0]
    n_nodes = postorder.shape[0]
    out_ll = np.empty(n_traits)
    out_abs = np.empty(n_traits)
    part = np.empty((n_nodes, 3))
    pabs = np.empty((n_nodes, 3))
    p = np.empty((3, 3))
    work = np.empty((3, 3, 3))
    for d in range(n_traits):
        for i in range(n_nodes):
            for k in range(3):
                part[i, k] = data[d, i, k]
                pabs[i, k] = absent[d, i, k]
        sc = 0.0
        sc_abs = 0.0
        dead = False
        dead_abs = False
        for step in range(n_nodes):
            i = postorder[step]
            m = max(part[i, 0], part[i, 1], part[i, 2])
            if m <= 0.0:
                dead = True
            else:
                for k in range(3):
                    part[i, k] /= m
                sc += math.log(m)
            m = max(pabs[i, 0], pabs[i, 1], pabs[i, 2])
            if m <= 0.0:
                dead_abs = True
            else:
                for k in range(3):
                    pabs[i, k] /= m
                sc_abs += math.log(m)
            if birth[d, i]:
                _expm3(q_birth[d], lengths[i], p, work)
            else:
                _expm3(q_nonbirth[d], lengths[i], p, work)
            j = parent[i]
            if j >= 0:
                for a in range(3):
                    part[j, a] *= p[a, 0] * part[i, 0] + p[a, 1] * part[i, 1] + p[a, 2] * part[i, 2]
                    pabs[j, a] *= p[a, 0] * pabs[i, 0] + p[a, 1] * pabs[i, 1] + p[a, 2] * pabs[i, 2]
            else:
                v = 0.0
                va = 0.0
                for a in range(3):
                    v += prior[a] * (p[a, 0] * part[i, 0] + p[a, 1] * part[i, 1] + p[a, 2] * part[i, 2])
                    va += prior[a] * (p[a, 0] * pabs[i, 0] + p[a, 1] * pabs[i, 1] + p[a, 2] * pabs[i, 2])
                out_ll[d] = -np.inf if (dead or v <= 0.0) else math.log(v) + sc
                out_abs[d] = -np.inf if (dead_abs or va <= 0.0) else math.log(va) + sc_abs
    return out_ll, out_abs


def corrected_log_likelihood(log_raw: np.ndarray, log_absent: np.ndarray) -> np.ndarray:
    """log P(x) - log(1 - P(x_abs)); -inf where the model is degenerate."""
    log_raw = np.asarray(log_raw, dtype=float)
    p_abs = np.exp(np.asarray(log_absent, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = np.where(p_abs < 1.0 - 1e-12, np.log1p(-np.minimum(p_abs, 1.0)), -np.inf)
        out = log_raw - denom
    return np.where(np.isfinite(denom), out, -np.inf)


def generators(rates: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised generators from a (D, 6) rate array.

    Rate columns: lam_minus, lam_plus, rho_mp, rho_pm, mu_minus, mu_plus.
    For ``kind == "class"`` returns (Q_birth, Q_nonbirth); for "concept"
    returns (Q_c, Q_c).
    """
    r = np.asarray(rates, dtype=float)
    lm, lp, rmp, rpm, mm, mp = r.T
    d = r.shape[0]
    if kind == "class":
        qb = np.zeros((d, 3, 3))
        qb[:, 0, 1], qb[:, 0, 2], qb[:, 0, 0] = lm, lp, -(lm + lp)
        qn = np.zeros((d, 3, 3))
        qn[:, 1, 0], qn[:, 1, 2], qn[:, 1, 1] = mm, rmp, -(mm + rmp)
        qn[:, 2, 0], qn[:, 2, 1], qn[:, 2, 2] = mp, rpm, -(mp + rpm)
        return qb, qn
    qc = np.zeros((d, 3, 3))
    qc[:, 0, 1], qc[:, 0, 2], qc[:, 0, 0] = lm, lp, -(lm + lp)
    qc[:, 1, 0], qc[:, 1, 2], qc[:, 1, 1] = mm, rmp, -(mm + rmp)
    qc[:, 2, 0], qc[:, 2, 1], qc[:, 2, 2] = mp, rpm, -(mp + rpm)
    return qc, qc


STATE_NAMES = tuple(s.token for s in TraitState)

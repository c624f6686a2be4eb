"""Posterior sampling, convergence checks, pooling and posterior summaries.

The sampler is adaptive Metropolis-within-Gibbs on a non-centred
parameterisation: global log means and log sigmas move jointly under a
Haario-style adaptive Gaussian proposal, and each unit's standardised
offsets move in their own block.  Units are conditionally independent
given the globals, so all unit blocks are proposed and accepted in one
vectorised step.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .models import RATE_NAMES, RATIO_NAMES, ModelSpec, ratio_array, varying_rates

log = logging.getLogger(__name__)

PSRF_THRESHOLD = 1.1
MONITORED = tuple(RATE_NAMES) + tuple(f"ratio_{r}" for r in RATIO_NAMES)


class InitializationError(RuntimeError):
    pass


class NoConvergedRunsError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChainConfig:
    chains: int = 4
    iterations: int = 2000
    burn_in: float = 0.5
    seed: int = 0
    # iterations before the global proposal covariance starts adapting
    adapt_window: int = 100
    global_moves: int = 4
    local_moves: int = 6

    def __post_init__(self):
        if self.chains < 1 or self.iterations < 1:
            raise ValueError("chains and iterations must be >= 1")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in must be in [0, 1)")

    @property
    def n_burn(self) -> int:
        return int(round(self.iterations * self.burn_in))

    @property
    def n_retained(self) -> int:
        return self.iterations - self.n_burn


@dataclass
class ChainResult:
    """Retained (post burn-in) draws of one chain."""

    chain: int
    iterations: np.ndarray
    log_means: np.ndarray
    sigma: np.ndarray
    unit_log_rates: np.ndarray | None = None
    accept_global: float = float("nan")
    accept_local: float = float("nan")
    tree_id: int = 0

    @property
    def ratios(self) -> np.ndarray:
        return ratio_array(self.log_means)

    def __len__(self) -> int:
        return len(self.iterations)


# -- target density ------------------------------------------------------------

class _Target:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.c = spec.compiled
        self.vary = varying_rates(spec.kind)
        self.vary_idx = np.flatnonzero(self.vary)
        self.active = spec.local_active()
        self.dim = 6 + len(self.vary_idx)
        self.prior = spec.prior
        self.unit = spec.trait_unit
        self.n_units = spec.n_units

    def unpack(self, theta):
        sigma = np.ones(6)
        sigma[self.vary_idx] = np.exp(theta[6:])
        return theta[:6], sigma

    def log_prior_global(self, theta) -> float:
        m = theta[:6]
        log_s = theta[6:]
        s = np.exp(log_s)
        ms, ss = self.prior.mean_scale, self.prior.sigma_scale
        # half-normal on sigma plus the log-sigma Jacobian
        return float(-0.5 * np.sum((m / ms) ** 2) - 0.5 * np.sum((s / ss) ** 2) + np.sum(log_s))

    def log_prior_local(self, z) -> np.ndarray:
        return -0.5 * np.sum((z * self.active) ** 2, axis=1)

    def trait_ll(self, theta, z) -> np.ndarray:
        m, sigma = self.unpack(theta)
        offsets = z * self.active * sigma[None, :]
        return self.c.trait_log_likelihoods(self.c.trait_rates(m, offsets))

    def unit_log_rates(self, theta, z) -> np.ndarray:
        m, sigma = self.unpack(theta)
        return m[None, :] + z * self.active * self.vary * sigma[None, :]


def _centered_update(tgt: _Target, theta, z, rng, sigma_steps: int = 5):
    """Gibbs update of (mean, sigma) per varying rate with unit log-rates held fixed.

    In centred coordinates b = m + sigma * z the likelihood does not depend
    on (m, sigma), so no likelihood evaluation is needed.  The mean has a
    conjugate normal conditional; log sigma takes a few random-walk steps.
    """
    theta = theta.copy()
    z = z.copy()
    ms, ss = tgt.prior.mean_scale, tgt.prior.sigma_scale
    for k, r in enumerate(tgt.vary_idx):
        act = tgt.active[:, r]
        n = int(act.sum())
        if n == 0:
            continue
        ls = theta[6 + k]
        sig = math.exp(ls)
        b = theta[r] + sig * z[act, r]
        prec = 1.0 / ms**2 + n / sig**2
        m = rng.normal(b.sum() / sig**2 / prec, 1.0 / math.sqrt(prec))
        ss_dev = float(np.sum((b - m) ** 2))

        def lp(x):
            s2 = math.exp(2.0 * x)
            return -0.5 * s2 / ss**2 + x - n * x - 0.5 * ss_dev / s2

        cur = lp(ls)
        step = 1.5 / math.sqrt(2.0 * n)
        for _ in range(sigma_steps):
            prop = ls + step * rng.standard_normal()
            new = lp(prop)
            if math.log(rng.uniform()) < new - cur:
                ls, cur = prop, new
        theta[r] = m
        theta[6 + k] = ls
        z[act, r] = (b - m) / math.exp(ls)
    return theta, z


def _finite_sum(x) -> float:
    s = float(np.sum(x))
    return s if math.isfinite(s) else -math.inf


def _run_chain(spec: ModelSpec, config: ChainConfig, chain: int, seed_seq, store_units: bool, tree_id: int):
    rng = np.random.default_rng(seed_seq)
    tgt = _Target(spec)
    dim, n_units = tgt.dim, tgt.n_units

    theta = z = ll = None
    for attempt in range(10):
        th = np.concatenate([rng.uniform(-1.0, 1.0, 6), np.log(rng.uniform(0.2, 1.0, dim - 6))])
        zz = rng.normal(0.0, 0.1, (n_units, 6)) * tgt.active
        terms = tgt.trait_ll(th, zz)
        if np.all(np.isfinite(terms)):
            theta, z, ll = th, zz, terms
            break
        log.debug("chain %d: non-finite initial log posterior (attempt %d)", chain, attempt + 1)
    if theta is None:
        bad = [tid for tid, v in zip(tgt.c.trait_ids, terms) if not np.isfinite(v)]
        raise InitializationError(
            f"chain {chain}: no finite initial log posterior after 10 attempts; "
            f"offending traits include {', '.join(bad[:10])}"
        )

    lp_g = tgt.log_prior_global(theta)
    lp_z = tgt.log_prior_local(z)

    n_burn = config.n_burn
    n_keep = config.n_retained
    keep_iter = np.empty(n_keep, dtype=np.int64)
    keep_means = np.empty((n_keep, 6))
    keep_sigma = np.empty((n_keep, 6))
    keep_units = np.empty((n_keep, n_units, 6)) if store_units else None

    # global proposal state
    cov = np.eye(dim) * 0.01
    chol = np.linalg.cholesky(cov)
    log_scale = 0.0
    hist_sum = np.zeros(dim)
    hist_outer = np.zeros((dim, dim))
    hist_n = 0
    # per-unit local step sizes
    n_act = tgt.active.sum(axis=1)
    local_log_step = np.full(n_units, math.log(0.5))
    local_target = np.where(n_act <= 1, 0.44, 0.3)

    acc_g = tried_g = 0
    acc_l = tried_l = 0
    k = 0
    for it in range(config.iterations):
        adapting = it < n_burn
        gamma = 1.0 / (it + 1) ** 0.6

        for _ in range(config.global_moves):
            prop = theta + math.exp(log_scale) * (chol @ rng.standard_normal(dim))
            lp_g_new = tgt.log_prior_global(prop)
            ll_new = tgt.trait_ll(prop, z)
            log_a = lp_g_new + _finite_sum(ll_new) - lp_g - float(np.sum(ll))
            accept = math.log(rng.uniform()) < log_a if math.isfinite(log_a) else False
            if accept:
                theta, lp_g, ll = prop, lp_g_new, ll_new
                acc_g += 1
            tried_g += 1
            if adapting:
                log_scale += gamma * ((1.0 if accept else 0.0) - 0.234)

        if n_units and tgt.active.any():
            theta, z = _centered_update(tgt, theta, z, rng)
            lp_g = tgt.log_prior_global(theta)
            lp_z = tgt.log_prior_local(z)
            for _ in range(config.local_moves):
                step = np.exp(local_log_step)[:, None]
                zp = z + step * rng.standard_normal(z.shape) * tgt.active
                lp_zp = tgt.log_prior_local(zp)
                ll_p = tgt.trait_ll(theta, zp)
                with np.errstate(invalid="ignore"):
                    delta = np.where(np.isfinite(ll_p), ll_p - ll, -np.inf)
                per_unit = np.bincount(tgt.unit, weights=np.nan_to_num(delta, neginf=-1e300), minlength=n_units)
                log_a = per_unit + lp_zp - lp_z
                acc = np.log(rng.uniform(size=n_units)) < log_a
                acc &= n_act > 0
                if acc.any():
                    z[acc] = zp[acc]
                    lp_z[acc] = lp_zp[acc]
                    moved = acc[tgt.unit]
                    ll[moved] = ll_p[moved]
                acc_l += int(acc.sum())
                tried_l += int((n_act > 0).sum())
                if adapting:
                    local_log_step += gamma * (acc.astype(float) - local_target)

        if adapting:
            hist_n += 1
            hist_sum += theta
            hist_outer += np.outer(theta, theta)
            if it + 1 >= config.adapt_window and (it + 1) % 25 == 0 and hist_n > dim + 1:
                mean = hist_sum / hist_n
                emp = (hist_outer - hist_n * np.outer(mean, mean)) / (hist_n - 1)
                cov = emp * (2.38**2 / dim) + 1e-8 * np.eye(dim)
                try:
                    chol = np.linalg.cholesky(cov)
                    log_scale = 0.0
                except np.linalg.LinAlgError:
                    pass
        else:
            m, sigma = tgt.unpack(theta)
            keep_iter[k] = it
            keep_means[k] = m
            keep_sigma[k] = sigma
            if store_units:
                keep_units[k] = tgt.unit_log_rates(theta, z)
            k += 1

    return ChainResult(
        chain=chain,
        iterations=keep_iter,
        log_means=keep_means,
        sigma=keep_sigma,
        unit_log_rates=keep_units,
        accept_global=acc_g / max(tried_g, 1),
        accept_local=acc_l / max(tried_l, 1),
        tree_id=tree_id,
    )


def sample(
    spec: ModelSpec,
    config: ChainConfig = ChainConfig(),
    tree_id: int = 0,
    store_units: bool | None = None,
    workers: int = 1,
) -> list[ChainResult]:
    """Run ``config.chains`` independent chains; only post burn-in draws are kept.

    Chain seeds derive from (config.seed, tree_id), so a run is reproducible
    bit for bit.  ``store_units`` defaults to True for concept models.
    """
    if store_units is None:
        store_units = spec.kind.value == "concept"
    spec.compiled  # build once before any fork
    seeds = np.random.SeedSequence([config.seed, tree_id]).spawn(config.chains)
    args = [(spec, config, c, seeds[c], store_units, tree_id) for c in range(config.chains)]
    if workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_chain_star, args))
    return [_run_chain(*a) for a in args]


def _run_chain_star(a):
    return _run_chain(*a)


# -- convergence -----------------------------------------------------------------

def psrf(chains) -> float:
    """Split potential scale reduction factor (split R-hat).

    ``chains`` is (m, n): m >= 2 chains of equal length n >= 10.  Each chain
    is split in half.  Zero within-chain variance gives 1.0 if the chains
    agree and inf otherwise.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise ValueError("psrf needs >= 2 chains of equal length >= 10")
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, x.shape[1] - half :]], axis=0)
    n = half
    means = split.mean(axis=1)
    w = split.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w <= 0.0:
        return 1.0 if b <= 0.0 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return math.sqrt(var_plus / w)


def is_degenerate(chains) -> bool:
    x = np.asarray(chains, dtype=float)
    return bool(np.all(x.var(axis=1) == 0.0))


def monitored_scalars(chains: Sequence[ChainResult]) -> dict[str, np.ndarray]:
    """(m, n) arrays for every monitored scalar."""
    means = np.stack([c.log_means for c in chains])
    ratios = np.stack([c.ratios for c in chains])
    out = {name: means[:, :, i] for i, name in enumerate(RATE_NAMES)}
    out.update({f"ratio_{name}": ratios[:, :, i] for i, name in enumerate(RATIO_NAMES)})
    return out


@dataclass
class TreeRun:
    tree_id: int
    chains: list[ChainResult]
    psrf: dict[str, float]
    degenerate: list[str] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return all(v < PSRF_THRESHOLD for v in self.psrf.values())


def check_convergence(tree_id: int, chains: list[ChainResult]) -> TreeRun:
    scalars = monitored_scalars(chains)
    if len(chains) < 2:
        # a single chain cannot be diagnosed; report it as unchecked but usable
        values = {k: float("nan") for k in scalars}
        run = TreeRun(tree_id, chains, values)
        run.psrf = {k: 1.0 for k in scalars}
        return run
    values = {k: psrf(v) for k, v in scalars.items()}
    degenerate = [k for k, v in scalars.items() if is_degenerate(v)]
    return TreeRun(tree_id, chains, values, degenerate)


def run_tree(spec: ModelSpec, config: ChainConfig, tree_id: int = 0, workers: int = 1) -> TreeRun:
    return check_convergence(tree_id, sample(spec, config, tree_id=tree_id, workers=workers))


# -- pooling -----------------------------------------------------------------------

@dataclass
class PooledSamples:
    tree_id: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    log_means: np.ndarray
    unit_log_rates: np.ndarray | None = None
    used_trees: list[int] = field(default_factory=list)
    excluded_trees: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iteration)

    @property
    def ratios(self) -> np.ndarray:
        return ratio_array(self.log_means)

    def unit_ratios(self) -> np.ndarray:
        """(n, U, 3) per-unit ratios."""
        if self.unit_log_rates is None:
            raise ValueError("no per-unit draws were stored")
        return ratio_array(self.unit_log_rates)


def pool(runs: Sequence[TreeRun]) -> PooledSamples:
    """Concatenate retained draws of converged tree runs; others are excluded."""
    good = [r for r in runs if r.converged]
    excluded = [r.tree_id for r in runs if not r.converged]
    if not good:
        raise NoConvergedRunsError(f"none of {len(runs)} tree runs converged")
    chains = [c for r in good for c in r.chains]
    units = None
    if all(c.unit_log_rates is not None for c in chains):
        units = np.concatenate([c.unit_log_rates for c in chains])
    return PooledSamples(
        tree_id=np.concatenate([np.full(len(c), r.tree_id) for r in good for c in r.chains]),
        chain=np.concatenate([np.full(len(c), c.chain) for c in chains]),
        iteration=np.concatenate([c.iterations for c in chains]),
        log_means=np.concatenate([c.log_means for c in chains]),
        unit_log_rates=units,
        used_trees=[r.tree_id for r in good],
        excluded_trees=excluded,
    )


# -- summaries --------------------------------------------------------------------

def hdi(samples, mass: float = 0.95) -> tuple[float, float]:
    """Shortest interval spanning ceil(mass * n) sorted samples (leftmost on ties)."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = len(x)
    if n < 100:
        raise ValueError(f"hdi needs at least 100 samples, got {n}")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    k = math.ceil(mass * n - 1e-9)
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


@dataclass
class RatioSummary:
    median: float
    hdi_low: float
    hdi_high: float
    pct_gt_1: float
    decisive_vs_1: bool
    baseline_median: float | None = None
    baseline_min: float | None = None
    baseline_max: float | None = None
    decisive_vs_baseline: bool | None = None


@dataclass
class SummaryReport:
    ratios: dict[str, RatioSummary]
    n_samples: int
    used_trees: list[int] = field(default_factory=list)
    excluded_trees: list[int] = field(default_factory=list)
    psrf: dict[str, dict[str, float]] = field(default_factory=dict)
    model: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_samples": self.n_samples,
            "used_trees": self.used_trees,
            "excluded_trees": self.excluded_trees,
            "psrf": self.psrf,
            "ratios": {k: vars(v) for k, v in self.ratios.items()},
        }


def summarize_ratio(samples, baseline=None, mass: float = 0.95) -> RatioSummary:
    x = np.asarray(samples, dtype=float)
    lo, hi = hdi(x, mass)
    s = RatioSummary(
        median=float(np.median(x)),
        hdi_low=lo,
        hdi_high=hi,
        pct_gt_1=float(100.0 * np.mean(x > 1.0)),
        decisive_vs_1=not (lo <= 1.0 <= hi),
    )
    if baseline is not None:
        s.baseline_median = float(baseline.median)
        s.baseline_min = float(baseline.min)
        s.baseline_max = float(baseline.max)
        s.decisive_vs_baseline = hi < baseline.min or lo > baseline.max
    return s


def summarize(pooled: PooledSamples, baselines: Mapping[str, object] | None = None, mass: float = 0.95) -> SummaryReport:
    """Median, HDI, % > 1 and decisiveness flags for the three ratios.

    ``baselines`` maps a ratio name ("birth", "mutation", "loss") to an
    object with ``median``, ``min`` and ``max`` (e.g. a BaselineReport).
    """
    if len(pooled) == 0:
        raise ValueError("no pooled samples")
    baselines = baselines or {}
    ratios = pooled.ratios
    out = {name: summarize_ratio(ratios[:, i], baselines.get(name), mass) for i, name in enumerate(RATIO_NAMES)}
    return SummaryReport(out, len(pooled), list(pooled.used_trees), list(pooled.excluded_trees))


@dataclass
class ContrastMatrix:
    concepts: list[str]
    percent: np.ndarray
    unranked: list[str] = field(default_factory=list)
    threshold: float = 95.0

    @property
    def decisive(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return self.percent >= self.threshold


def pairwise_contrasts(per_concept: Mapping[str, np.ndarray], ranking: Mapping[str, float] | None = None) -> ContrastMatrix:
    """Percent of joint draws in which concept a's ratio exceeds concept b's.

    Draws are paired by index; ties count one half.  Rows and columns
    follow ``ranking`` (lower rank first); unranked concepts go last in
    name order and are reported.
    """
    if len(per_concept) < 2:
        raise ValueError("need at least two concepts")
    ranking = ranking or {}
    names = list(per_concept)
    ranked = sorted((c for c in names if c in ranking), key=lambda c: (ranking[c], c))
    unranked = sorted(c for c in names if c not in ranking)
    order = ranked + unranked
    x = np.stack([np.asarray(per_concept[c], dtype=float) for c in order])
    gt = (x[:, None, :] > x[None, :, :]).mean(axis=2)
    eq = (x[:, None, :] == x[None, :, :]).mean(axis=2)
    pct = 100.0 * (gt + 0.5 * eq)
    np.fill_diagonal(pct, np.nan)
    return ContrastMatrix(order, pct, unranked)


# -- output ------------------------------------------------------------------------

POSTERIOR_COLUMNS = ("tree_id", "chain", "iter") + RATE_NAMES + tuple(f"ratio_{r}" for r in RATIO_NAMES)


def write_posterior_csv(path, pooled: PooledSamples) -> None:
    ratios = pooled.ratios
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POSTERIOR_COLUMNS)
        for i in range(len(pooled)):
            w.writerow(
                [int(pooled.tree_id[i]), int(pooled.chain[i]), int(pooled.iteration[i])]
                + [repr(float(v)) for v in pooled.log_means[i]]
                + [repr(float(v)) for v in ratios[i]]
            )


def write_contrasts_csv(path, matrices: Mapping[str, ContrastMatrix]) -> None:
    """One block per ratio: ratio, concept, then one column per ranked concept."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header_written = False
        for ratio, m in matrices.items():
            if not header_written:
                w.writerow(["ratio", "concept"] + m.concepts)
                header_written = True
            for i, c in enumerate(m.concepts):
                w.writerow([ratio, c] + ["" if np.isnan(v) else f"{v:.4f}" for v in m.percent[i]])

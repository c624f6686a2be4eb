"""Hierarchical rate models for cognate-class (Dollo) and cognate-concept traits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ctm
from .phylo import Phylogeny, classify_branches
from .traits import StateSupport, TraitKind, TraitMatrix, TraitState, state_support

RATE_NAMES = ("lam_minus", "lam_plus", "rho_mp", "rho_pm", "mu_minus", "mu_plus")
RATIO_NAMES = ("birth", "mutation", "loss")
RHO = [2, 3]
RHO_RULES = ("attested", "all")

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def varying_rates(kind: TraitKind) -> np.ndarray:
    """Which of the six rates carry per-unit variation (and hence a sigma)."""
    if TraitKind(kind) is TraitKind.COGNATE_CLASS:
        return np.array([False, False, True, True, True, True])
    return np.ones(6, dtype=bool)


@dataclass(frozen=True)
class GlobalParams:
    """Log mean rates (order of RATE_NAMES) and their spread parameters.

    ``sigma`` has one entry per rate; entries for rates without local
    variation are ignored.
    """

    log_means: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "log_means", np.asarray(self.log_means, dtype=float).reshape(6))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float).reshape(6))

    @classmethod
    def from_dict(cls, d: dict) -> GlobalParams:
        means = [d["log_means"][k] for k in RATE_NAMES]
        sig = [d.get("sigma", {}).get(k, 1.0) for k in RATE_NAMES]
        return cls(np.array(means), np.array(sig))

    def to_dict(self) -> dict:
        return {
            "log_means": dict(zip(RATE_NAMES, map(float, self.log_means))),
            "sigma": dict(zip(RATE_NAMES, map(float, self.sigma))),
        }


@dataclass(frozen=True)
class LocalParams:
    """Per-unit log multipliers; ``active`` marks the ones that exist."""

    offsets: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.atleast_2d(np.asarray(self.offsets, dtype=float)))
        object.__setattr__(self, "active", np.atleast_2d(np.asarray(self.active, dtype=bool)))


@dataclass(frozen=True)
class PriorSpec:
    mean_scale: float = 1.0
    sigma_scale: float = 1.0


def rate_ratios(globals_: GlobalParams | np.ndarray) -> tuple[float, float, float]:
    """(birth, mutation, loss) = exp(lam- - lam+), exp(rho+- - rho-+), exp(mu+ - mu-)."""
    m = globals_.log_means if isinstance(globals_, GlobalParams) else np.asarray(globals_)
    return (math.exp(m[0] - m[1]), math.exp(m[3] - m[2]), math.exp(m[5] - m[4]))


def ratio_array(log_means: np.ndarray) -> np.ndarray:
    """Vectorised rate_ratios over a (..., 6) array."""
    m = np.asarray(log_means)
    return np.exp(np.stack([m[..., 0] - m[..., 1], m[..., 3] - m[..., 2], m[..., 5] - m[..., 4]], axis=-1))


def rho_allowed(support: StateSupport) -> bool:
    return support.has_both_ic


def unit_rates(kind, globals_: GlobalParams, offsets, support: StateSupport) -> np.ndarray:
    """Six concrete rates for one trait given its unit's log offsets."""
    kind = TraitKind(kind)
    off = np.asarray(offsets, dtype=float).reshape(6) * varying_rates(kind)
    rates = np.exp(globals_.log_means + off)
    if kind is TraitKind.COGNATE_CLASS and not rho_allowed(support):
        rates[RHO] = 0.0
    return rates


def _log_normal(x, scale):
    return -0.5 * (np.asarray(x) / scale) ** 2 - np.log(scale) - _LOG_SQRT_2PI


def _log_half_normal(x, scale):
    return math.log(2.0) + _log_normal(x, scale)


def log_prior(kind, globals_: GlobalParams, locals_: LocalParams | None, prior: PriorSpec = PriorSpec()) -> float:
    """N(0, 1) on log means, HalfNormal(0, 1) on sigmas, N(0, sigma) on offsets."""
    vary = varying_rates(kind)
    sig = globals_.sigma[vary]
    if np.any(~(sig > 0)) or not np.all(np.isfinite(globals_.log_means)):
        return -math.inf
    lp = float(np.sum(_log_normal(globals_.log_means, prior.mean_scale)))
    lp += float(np.sum(_log_half_normal(sig, prior.sigma_scale)))
    if locals_ is not None and locals_.offsets.size:
        act = locals_.active & vary
        cols = np.broadcast_to(globals_.sigma, locals_.offsets.shape)
        vals = _log_normal(locals_.offsets[act], cols[act])
        if not np.all(np.isfinite(locals_.offsets[act])):
            return -math.inf
        lp += float(np.sum(vals))
    return lp


# -- model specification -------------------------------------------------------

def default_stem_length(tree: Phylogeny) -> float:
    return 0.5 * tree.height()


def stemmed_tree(tree: Phylogeny, stem_length: float | None = None) -> Phylogeny:
    """``tree`` with its stem set: explicit length, else the root's Newick
    length if positive, else half the tree height."""
    if stem_length is None:
        stem_length = tree.nodes[tree.root].length or default_stem_length(tree)
    if stem_length < 0:
        raise ValueError("stem length must be >= 0")
    return tree.with_stem(stem_length)


@dataclass
class ModelSpec:
    kind: TraitKind
    traits: Sequence[TraitMatrix]
    tree: Phylogeny
    prior: PriorSpec = field(default_factory=PriorSpec)
    stem_length: float | None = None
    # "attested": mutation rates only for class traits attesting both +-IC;
    # "all": every trait keeps them
    rho_rule: str = "attested"

    def __post_init__(self):
        self.kind = TraitKind(self.kind)
        if self.rho_rule not in RHO_RULES:
            raise ValueError(f"rho_rule must be one of {RHO_RULES}")
        self.traits = list(self.traits)
        for t in self.traits:
            if t.kind is not self.kind:
                raise ValueError(f"trait {t.trait_id} is a {t.kind.value} trait, model is {self.kind.value}")
        if self.kind is TraitKind.COGNATE_CONCEPT:
            self.units = list(dict.fromkeys(t.concept_id for t in self.traits))
            index = {c: i for i, c in enumerate(self.units)}
            self.trait_unit = np.array([index[t.concept_id] for t in self.traits], dtype=np.int64)
        else:
            self.units = [t.trait_id for t in self.traits]
            self.trait_unit = np.arange(len(self.traits), dtype=np.int64)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @cached_property
    def compiled(self) -> CompiledModel:
        return CompiledModel(self)

    def supports(self) -> list[StateSupport]:
        return self.compiled.supports

    def local_active(self) -> np.ndarray:
        """(U, 6) mask of offsets that exist as parameters."""
        vary = varying_rates(self.kind)
        act = np.tile(vary, (self.n_units, 1))
        if self.kind is TraitKind.COGNATE_CLASS:
            act[:, RHO] &= self.compiled.rho_active[:, None]
        return act


class CompiledModel:
    """Array form of a ModelSpec for fast repeated likelihood evaluation."""

    def __init__(self, spec: ModelSpec):
        tree = stemmed_tree(spec.tree, spec.stem_length)
        self.tree = tree
        self.kind = spec.kind
        order = tree.postorder()
        n = len(tree.nodes)
        self.postorder = np.array(order, dtype=np.int64)
        self.parent = np.array([nd.parent for nd in tree.nodes], dtype=np.int64)
        self.lengths = np.array([nd.length for nd in tree.nodes], dtype=float)

        unknown = sorted({t.trait_id for t in spec.traits for lab in t.rows if lab not in tree.tips})
        if unknown:
            raise ValueError(f"traits mention tips missing from the tree: {', '.join(unknown[:10])}")

        d = len(spec.traits)
        self.data = np.ones((d, n, 3))
        self.absent = np.ones((d, n, 3))
        self.birth = np.zeros((d, n), dtype=bool)
        self.mrca = np.full(d, -1, dtype=np.int64)
        tips = list(tree.tips)
        for label, i in tree.tips.items():
            self.absent[:, i] = (1.0, 0.0, 0.0)
        self.supports = []
        for k, t in enumerate(spec.traits):
            for label, i in tree.tips.items():
                self.data[k, i] = t.row(label)
            sup = state_support(t, tips)
            if self.kind is TraitKind.COGNATE_CLASS:
                cls = classify_branches(tree, t.present_tips(), t.trait_id)
                self.birth[k, list(cls.birth)] = True
                self.mrca[k] = cls.mrca
                # grafted zero-length tip at the MRCA: P(0) = I, so it folds into the node row
                ind = np.zeros(3)
                ind[t.recon_state] = 1.0
                self.data[k, cls.mrca] *= ind
                self.absent[k, cls.mrca] *= ind
                sup = StateSupport(sup.trait_id, sup.states | {TraitState(t.recon_state)})
            self.supports.append(sup)
        if spec.rho_rule == "all" or self.kind is TraitKind.COGNATE_CONCEPT:
            self.rho_active = np.ones(d, dtype=bool)
        else:
            self.rho_active = np.array([rho_allowed(s) for s in self.supports], dtype=bool)
        self.trait_unit = spec.trait_unit
        self.n_units = spec.n_units
        self.trait_ids = [t.trait_id for t in spec.traits]

    def trait_rates(self, log_means: np.ndarray, unit_offsets: np.ndarray) -> np.ndarray:
        """(D, 6) rates from global log means and (U, 6) centred offsets."""
        off = unit_offsets[self.trait_unit] * varying_rates(self.kind)
        rates = np.exp(log_means[None, :] + off)
        rates[~self.rho_active, 2:4] = 0.0
        return rates

    def raw_log_likelihoods(self, rates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        qb, qn = ctm.generators(rates, self.kind.value)
        return ctm.prune_batch(
            self.postorder, self.parent, self.lengths, self.birth,
            np.ascontiguousarray(qb), np.ascontiguousarray(qn),
            self.data, self.absent, ctm.ABSENT_ROOT,
        )

    def trait_log_likelihoods(self, rates: np.ndarray) -> np.ndarray:
        """Ascertainment-corrected log-likelihood per trait."""
        if len(rates) == 0:
            return np.zeros(0)
        ll, labs = self.raw_log_likelihoods(rates)
        return ctm.corrected_log_likelihood(ll, labs)


def log_likelihood_terms(spec: ModelSpec, globals_: GlobalParams, locals_: LocalParams | None) -> np.ndarray:
    c = spec.compiled
    offsets = np.zeros((spec.n_units, 6)) if locals_ is None else locals_.offsets * spec.local_active()
    return c.trait_log_likelihoods(c.trait_rates(globals_.log_means, offsets))


def log_posterior(spec: ModelSpec, globals_: GlobalParams, locals_: LocalParams | None) -> float:
    """log prior + sum of ascertainment-corrected trait log-likelihoods."""
    if locals_ is None:
        locals_ = LocalParams(np.zeros((spec.n_units, 6)), spec.local_active())
    else:
        locals_ = LocalParams(locals_.offsets, locals_.active & spec.local_active())
    lp = log_prior(spec.kind, globals_, locals_, spec.prior)
    if lp == -math.inf:
        return lp
    terms = log_likelihood_terms(spec, globals_, locals_)
    bad = [tid for tid, v in zip(spec.compiled.trait_ids, terms) if not np.isfinite(v)]
    if bad:
        raise ctm.ImpossibleDataError(f"zero likelihood for traits: {', '.join(bad)}")
    return lp + float(terms.sum())


# -- configuration -------------------------------------------------------------

@dataclass
class ModelConfig:
    kind: TraitKind = TraitKind.COGNATE_CLASS
    prior: PriorSpec = field(default_factory=PriorSpec)
    concept_allow_list: str | None = None
    stem_length: float | None = None
    rho_rule: str = "attested"

    @classmethod
    def load(cls, path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        prior = d.get("prior", {})
        return cls(
            kind=TraitKind.parse(d.get("kind", "class")),
            prior=PriorSpec(float(prior.get("mean_scale", 1.0)), float(prior.get("sigma_scale", 1.0))),
            concept_allow_list=d.get("concept_allow_list"),
            stem_length=d.get("stem_length"),
            rho_rule=d.get("rho_rule", "attested"),
        )

"""Bayesian rate inference for identical-consonant lexical traits on language trees."""

from .ctm import build_q_birth, build_q_concept, build_q_nonbirth, expm, prune_likelihood
from .inference import ChainConfig, hdi, pairwise_contrasts, pool, psrf, sample, summarize
from .models import GlobalParams, ModelSpec, rate_ratios
from .phylo import Phylogeny, parse_newick, read_trees
from .traits import TraitKind, TraitMatrix, TraitState, load_traits

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "GlobalParams",
    "ModelSpec",
    "Phylogeny",
    "TraitKind",
    "TraitMatrix",
    "TraitState",
    "build_q_birth",
    "build_q_concept",
    "build_q_nonbirth",
    "expm",
    "hdi",
    "load_traits",
    "pairwise_contrasts",
    "parse_newick",
    "pool",
    "prune_likelihood",
    "psrf",
    "rate_ratios",
    "read_trees",
    "sample",
    "summarize",
]

"""Command-line entry point: ``icdollo {code,analyze,baseline,simulate}``.

Exit codes: 0 success, 1 bad input or runtime error, 2 no tree run converged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import inference as inf
from .lexproc import SegmentTable, code_dataset, load_etyma, load_wordlist, normalize
from .models import RATIO_NAMES, RHO_RULES, ModelConfig, ModelSpec, PriorSpec
from .phylo import read_trees
from .sim import SimConfig, simulate_dataset, write_dataset
from .traits import TraitKind, filter_dataset, load_allow_list, load_traits, write_traits

log = logging.getLogger("icdollo")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 2


class CliError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _atomic_via(path: Path, writer) -> None:
    """Run ``writer(tmp_path)`` and move the result into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


# -- code ----------------------------------------------------------------------------

def cmd_code(args) -> int:
    table = SegmentTable.load(_existing(args.table, "segment table"))
    entries = load_wordlist(_existing(args.wordlist, "word list"))
    etyma = load_etyma(_existing(args.etyma, "etyma file")) if args.etyma else None
    coded = code_dataset(entries, table, etyma)
    if args.tree_file:
        languages = read_trees(_existing(args.tree_file, "tree file"))[0]
    else:
        languages = sorted({e.language for e in entries})
    result = filter_dataset(coded.traits, languages, args.min_reflexes, args.min_coverage)
    out = Path(args.out)
    _atomic_via(out, lambda tmp: write_traits(result.traits, tmp))
    dropped = result.dropped + coded.skipped
    if dropped:
        _atomic_write(out.with_suffix(".dropped.tsv"), "entity\treason\n" + "".join(f"{e}\t{r}\n" for e, r in dropped))
    log.info("wrote %d traits over %d languages to %s", len(result.traits), len(result.languages), out)
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    model: str = "class"
    traits: str | None = None
    tree_file: str | None = None
    trees: int = 25
    chains: int = 4
    iters: int = 2000
    burn_in: float = 0.5
    seed: int = 0
    threads: int = 1
    out: str = "out"
    concept_allow_list: str | None = None
    ranking: str | None = None
    baseline_birth: str | None = None
    baseline_mutation: str | None = None
    stem_length: float | None = None
    rho_rule: str = "attested"
    prior: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, config_path: str | None, overrides: dict) -> RunConfig:
        """JSON config (keys as the long flag names, dashes or underscores)
        with command-line flags taking precedence."""
        data: dict = {}
        base = Path(".")
        if config_path:
            p = _existing(config_path, "config file")
            data = {k.replace("-", "_"): v for k, v in json.loads(p.read_text(encoding="utf-8")).items()}
            base = p.parent
            for key in ("traits", "tree_file", "concept_allow_list", "ranking", "baseline_birth", "baseline_mutation"):
                if data.get(key) and not Path(data[key]).is_absolute():
                    data[key] = str(base / data[key])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None and k in known})
        cfg = cls(**data)
        if cfg.traits is None or cfg.tree_file is None:
            raise CliError("analyze needs a traits file and a tree file")
        if cfg.trees < 1:
            raise CliError("--trees must be >= 1")
        _existing(cfg.traits, "traits file")
        _existing(cfg.tree_file, "tree file")
        return cfg

    @property
    def chain_config(self) -> inf.ChainConfig:
        return inf.ChainConfig(chains=self.chains, iterations=self.iters, burn_in=self.burn_in, seed=self.seed)


def _load_ranking(path: Path) -> dict[str, float]:
    ranks = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not rec or not rec[0].strip() or rec[0].startswith("#"):
                continue
            try:
                ranks[rec[0].strip()] = float(rec[1])
            except (IndexError, ValueError):
                if lineno == 1:
                    continue  # header
                raise CliError(f"{path}:{lineno}: expected concept<TAB>rank") from None
    return ranks


def _run_one_tree(spec: ModelSpec, chain_config: inf.ChainConfig, tree_id: int, run_dir: Path) -> inf.TreeRun:
    run = inf.run_tree(spec, chain_config, tree_id)
    pooled_one = inf.PooledSamples(
        tree_id=np.concatenate([np.full(len(c), tree_id) for c in run.chains]),
        chain=np.concatenate([np.full(len(c), c.chain) for c in run.chains]),
        iteration=np.concatenate([c.iterations for c in run.chains]),
        log_means=np.concatenate([c.log_means for c in run.chains]),
    )
    _atomic_via(run_dir / f"tree_{tree_id:03d}.csv", lambda tmp: inf.write_posterior_csv(tmp, pooled_one))
    meta = {
        "tree_id": tree_id,
        "converged": run.converged,
        "psrf": run.psrf,
        "degenerate": run.degenerate,
        "accept_global": [c.accept_global for c in run.chains],
        "accept_local": [c.accept_local for c in run.chains],
    }
    _atomic_write(run_dir / f"tree_{tree_id:03d}.json", json.dumps(meta, indent=2, default=_json_default) + "\n")
    return run


def _run_one_tree_star(a):
    return _run_one_tree(*a)


def _json_default(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x)}")


def _clean(obj):
    """Replace non-finite floats (not valid JSON) with None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def load_summary_schema() -> dict:
    return json.loads(resources.files("icdollo").joinpath("summary.schema.json").read_text(encoding="utf-8"))


def validate_summary(summary: dict) -> None:
    import jsonschema

    jsonschema.validate(summary, load_summary_schema())


def cmd_analyze(args) -> int:
    overrides = {
        "model": args.model, "traits": args.traits, "tree_file": args.tree_file, "trees": args.trees,
        "chains": args.chains, "iters": args.iters, "burn_in": args.burn_in, "seed": args.seed,
        "threads": args.threads, "out": args.out, "concept_allow_list": args.concept_allow_list,
        "ranking": args.ranking, "baseline_birth": args.baseline_birth,
        "baseline_mutation": args.baseline_mutation, "stem_length": args.stem_length,
        "rho_rule": args.rho_rule,
    }
    cfg = RunConfig.from_sources(args.config, overrides)
    kind = TraitKind.parse(cfg.model)
    model_cfg = ModelConfig(kind, PriorSpec(**cfg.prior), cfg.concept_allow_list, cfg.stem_length, cfg.rho_rule)

    trees = read_trees(_existing(cfg.tree_file, "tree file"))
    if cfg.trees > len(trees):
        raise CliError(f"--trees {cfg.trees} but {cfg.tree_file} holds only {len(trees)} trees")
    traits = [t for t in load_traits(_existing(cfg.traits, "traits file")) if t.kind is kind]
    if model_cfg.concept_allow_list and kind is TraitKind.COGNATE_CONCEPT:
        allowed = load_allow_list(_existing(model_cfg.concept_allow_list, "concept allow-list"))
        traits = [t for t in traits if t.concept_id in allowed]
    if not traits:
        raise CliError(f"no {kind.value} traits to analyse")

    out = Path(cfg.out)
    run_dir = out / "runs"
    jobs = []
    for tree_id, tree in enumerate(trees[: cfg.trees]):
        tips = set(tree.tip_labels)
        kept = [r for r in (t.restricted(tips) for t in traits) if r is not None]
        if not kept:
            raise CliError(f"tree {tree_id}: no trait is present on its tips")
        spec = ModelSpec(kind, kept, tree, model_cfg.prior, model_cfg.stem_length, model_cfg.rho_rule)
        jobs.append((spec, cfg.chain_config, tree_id, run_dir))

    if cfg.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            runs = list(pool.map(_run_one_tree_star, jobs))
    else:
        runs = [_run_one_tree(*j) for j in jobs]
    for r in runs:
        if not r.converged:
            log.warning("tree %d did not converge (max psrf %.3f); excluded", r.tree_id, max(r.psrf.values()))

    try:
        pooled = inf.pool(runs)
    except inf.NoConvergedRunsError as exc:
        log.error("%s", exc)
        _atomic_write(out / "summary.json", json.dumps(_clean({
            "model": kind.value, "converged": False,
            "psrf": {str(r.tree_id): r.psrf for r in runs},
        }), indent=2) + "\n")
        return EXIT_NOT_CONVERGED

    base = {}
    if cfg.baseline_birth:
        base["birth"] = bl.BaselineReport.from_dict(json.loads(_existing(cfg.baseline_birth, "birth baseline").read_text()))
    if cfg.baseline_mutation:
        base["mutation"] = bl.BaselineReport.from_dict(json.loads(_existing(cfg.baseline_mutation, "mutation baseline").read_text()))
    report = inf.summarize(pooled, base)
    report.model = kind.value
    report.psrf = {str(r.tree_id): r.psrf for r in runs}
    summary = report.to_dict()
    summary["seed"] = cfg.seed

    _atomic_via(out / "posterior.csv", lambda tmp: inf.write_posterior_csv(tmp, pooled))
    if kind is TraitKind.COGNATE_CONCEPT:
        units = jobs[0][0].units
        per_unit = pooled.unit_ratios()
        ranking = _load_ranking(_existing(cfg.ranking, "ranking file")) if cfg.ranking else {}
        matrices = {}
        summary["concepts"] = {
            u: {name: vars(inf.summarize_ratio(per_unit[:, j, i])) for i, name in enumerate(RATIO_NAMES)}
            for j, u in enumerate(units)
        }
        for i, name in enumerate(RATIO_NAMES):
            m = inf.pairwise_contrasts({u: per_unit[:, j, i] for j, u in enumerate(units)}, ranking)
            matrices[name] = m
        summary["unranked_concepts"] = matrices["birth"].unranked if ranking else []
        if ranking and matrices["birth"].unranked:
            log.warning("concepts without a rank (placed last): %s", ", ".join(matrices["birth"].unranked))
        _atomic_via(out / "contrasts.csv", lambda tmp: inf.write_contrasts_csv(tmp, matrices))

    summary = _clean(summary)
    validate_summary(summary)
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    log.info("pooled %d samples from %d tree(s); outputs in %s", len(pooled), len(pooled.used_trees), out)
    return EXIT_OK


# -- baseline ----------------------------------------------------------------------------

def _forms_by_language(args, table):
    entries = load_wordlist(_existing(args.wordlist, "word list"))
    allowed = load_allow_list(_existing(args.allow_list, "allow-list")) if args.allow_list else None
    out: dict[str, list] = {}
    for e in entries:
        if allowed is not None and e.concept not in allowed:
            continue
        try:
            out.setdefault(e.language, []).append(normalize(e.form, table))
        except ValueError as exc:
            raise CliError(f"{args.wordlist}:{e.line}: {exc}") from None
    return out


def cmd_baseline(args) -> int:
    if args.kind == "inventory":
        report = bl.inventory_birth_bound(bl.load_consonant_counts(_existing(args.counts, "consonant counts")))
    else:
        table = SegmentTable.load(_existing(args.table, "segment table"))
        forms = _forms_by_language(args, table)
        if args.kind == "lexicon":
            report = bl.lexicon_birth_ratio(forms, table)
        else:
            report = bl.sound_change_sim(
                forms, table, iterations=args.iterations, seed=args.seed,
                min_entries=args.min_entries, smoothing=args.smoothing,
            )
    text = report.to_json() + "\n"
    if args.out:
        _atomic_write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = SimConfig.load(_existing(args.config, "simulation config"))
    if args.seed is not None:
        cfg.seed = args.seed
    ds = simulate_dataset(cfg)
    traits_path, truth_path = write_dataset(ds, args.out, args.stem)
    log.info("wrote %d traits to %s and truth to %s", len(ds.traits), traits_path, truth_path)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icdollo", description="Rates of identical-consonant lexical traits on language trees.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("code", help="code word lists into the trait TSV")
    c.add_argument("--wordlist", required=True)
    c.add_argument("--table", required=True, help="segment table TSV (symbol, class)")
    c.add_argument("--etyma", help="etyma TSV; omit for concept coding")
    c.add_argument("--tree-file", help="languages are taken from the first tree's tips")
    c.add_argument("--min-reflexes", type=int, default=250)
    c.add_argument("--min-coverage", type=float, default=0.10)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_code)

    a = sub.add_parser("analyze", help="sample posteriors over tree samples and summarise")
    a.add_argument("--config", help="JSON run config; flags override it")
    a.add_argument("--model", choices=["class", "concept"])
    a.add_argument("--traits")
    a.add_argument("--tree-file")
    a.add_argument("--trees", type=int)
    a.add_argument("--chains", type=int)
    a.add_argument("--iters", type=int)
    a.add_argument("--burn-in", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--threads", type=int)
    a.add_argument("--out")
    a.add_argument("--concept-allow-list")
    a.add_argument("--ranking", help="TSV concept<TAB>rank, lower rank first")
    a.add_argument("--baseline-birth", help="BaselineReport JSON")
    a.add_argument("--baseline-mutation", help="BaselineReport JSON")
    a.add_argument("--stem-length", type=float)
    a.add_argument("--rho-rule", choices=RHO_RULES,
                   help="attested (default): class traits get mutation rates only if they attest both +-IC")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("baseline", help="neutral baselines")
    b.add_argument("kind", choices=["inventory", "lexicon", "mutation"])
    b.add_argument("--counts", help="TSV language<TAB>consonant count (inventory)")
    b.add_argument("--wordlist")
    b.add_argument("--table")
    b.add_argument("--allow-list", help="restrict forms to these concepts")
    b.add_argument("--iterations", type=int, default=bl.DEFAULT_ITERATIONS)
    b.add_argument("--min-entries", type=int, default=bl.MIN_ENTRIES)
    b.add_argument("--smoothing", type=float, default=bl.SMOOTHING)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("simulate", help="simulate a trait dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--stem", default="sim", help="output file prefix")
    s.set_defaults(func=cmd_simulate)
    return p


def _check_baseline_args(args, parser):
    if args.command != "baseline":
        return
    if args.kind == "inventory" and not args.counts:
        parser.error("baseline inventory needs --counts")
    if args.kind in ("lexicon", "mutation") and not (args.wordlist and args.table):
        parser.error(f"baseline {args.kind} needs --wordlist and --table")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_baseline_args(args, parser)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

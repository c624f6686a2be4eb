"""Regenerate the bundled demo files (deterministic)."""

from pathlib import Path

import numpy as np

from icdollo.models import GlobalParams
from icdollo.phylo import parse_newick
from icdollo.sim import SimConfig, simulate_dataset, write_dataset

HERE = Path(__file__).parent
RATES = np.log([1.0, 0.1, 0.2, 0.6, 0.5, 0.5])


def tree_text(rng, n_tips=12):
    # random ultrametric-ish coalescent shape, height about 1
    nodes = [(f"L{i:02d}", 0.0) for i in range(n_tips)]
    t = 0.0
    while len(nodes) > 1:
        k = len(nodes)
        t += rng.exponential(2.0 / (k * (k - 1)))
        i, j = sorted(rng.choice(k, 2, replace=False))
        (a, ta), (b, tb) = nodes[i], nodes[j]
        merged = (f"({a}:{t - ta:.4f},{b}:{t - tb:.4f})", t)
        nodes = [x for n, x in enumerate(nodes) if n not in (i, j)] + [merged]
    text, height = nodes[0]
    return text, height


def main():
    rng = np.random.default_rng(7)
    lines = []
    for _ in range(3):
        text, h = tree_text(rng)
        tree = parse_newick(text + ";")
        scale = 1.0 / h
        lines.append(_scaled(text, scale) + ";")
    (HERE / "trees.nwk").write_text("\n".join(lines) + "\n", encoding="utf-8")
    tree = parse_newick(lines[0])

    cls = SimConfig("class", GlobalParams(RATES, [0, 0, 0.3, 0.3, 0.3, 0.3]), tree, n_traits=150, seed=11)
    write_dataset(simulate_dataset(cls), HERE, "class")
    con = SimConfig("concept", GlobalParams(RATES, [0.5] * 6), tree, n_traits=120, n_concepts=8, seed=12)
    write_dataset(simulate_dataset(con), HERE, "concept")


def _scaled(text, scale):
    import re

    return re.sub(r":([0-9.]+)", lambda m: f":{float(m.group(1)) * scale:.4f}", text)


if __name__ == "__main__":
    main()

"""Target-mask generation for the assessing model.

The rule evaluation (row selection + aggregation) has no useful gradient
w.r.t. the mask, so targets are found by search instead: random walks on
the row graph, amended with the rows the rule network currently blames,
are dropped prefix by prefix until the rule network gets the label right.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assess import RowGraph
from .measure import MeasureTable
from .numerics import seeded_rng, split_rng
from .rule_net import RuleNet


@dataclass(frozen=True)
class SearchConfig:
    chi: int = 15
    tau: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.chi < 1 or self.tau < 1:
            raise ValueError("chi and tau must both be >= 1")


@dataclass
class SearchResult:
    mask: np.ndarray | None
    evaluations: int
    steps: list[int] = field(default_factory=list)
    paths: list[np.ndarray] = field(default_factory=list)
    success: tuple[int, int] | None = None  # (step index, path index)

    def log_record(self, sample_id=None) -> dict:
        return {
            "sample_id": sample_id,
            "steps": [int(s) for s in self.steps],
            "path_lengths": [int(len(p)) for p in self.paths],
            "evaluations": int(self.evaluations),
            "success_step": None if self.success is None else int(self.steps[self.success[0]]),
        }


def is_correct(output, y) -> np.ndarray:
    """|y' - y| < 1 with y' the smooth rule score in (-1, 1)."""
    return np.abs(np.asarray(output) - y) < 1.0


def random_walk(g: RowGraph, start: int, length: int, rng, neighbors=None) -> np.ndarray:
    """Uniform random walk of ``length`` visits (repeats allowed).

    From a node without neighbours the walk restarts at a uniformly random
    node.
    """
    if g.n == 0:
        raise ValueError("cannot walk on an empty graph")
    nbrs = g.neighbors() if neighbors is None else neighbors
    out = np.empty(length, dtype=np.int64)
    cur = int(start)
    for i in range(length):
        out[i] = cur
        if i + 1 == length:
            break
        nb = nbrs[cur]
        cur = int(rng.integers(g.n)) if len(nb) == 0 else int(nb[rng.integers(len(nb))])
    return out


def dedupe(path) -> np.ndarray:
    """Drop repeated nodes, keeping first occurrences in order."""
    path = np.asarray(path, dtype=np.int64)
    _, first = np.unique(path, return_index=True)
    return path[np.sort(first)]


def candidate_paths(g: RowGraph, length: int, extra_rows, tau: int, rng) -> list[np.ndarray]:
    nbrs = g.neighbors()
    extra = np.array(sorted(extra_rows), dtype=np.int64)
    paths = []
    for _ in range(tau):
        walk = random_walk(g, int(rng.integers(g.n)), length, rng, nbrs)
        amended = rng.permutation(np.concatenate([walk, extra]))
        paths.append(dedupe(amended))
    return paths


def greedy_search(
    sample,
    net: RuleNet,
    g: RowGraph,
    cfg: SearchConfig = SearchConfig(),
    rng=None,
    table: MeasureTable | None = None,
) -> SearchResult:
    """Find an all-ones mask with a path prefix zeroed that makes ``net``
    classify the sample as ``y``; ``mask`` is None when nothing works.

    Candidates are tried in (step, path) order and at most chi * tau rule
    evaluations are spent; a step larger than a path drops the whole path.
    """
    if table is None:
        table = MeasureTable(net.rules.measurements, sample)
    if rng is None:
        rng = seeded_rng(cfg.seed)
    y = sample.y
    n = table.n_rows
    if n == 0:
        return SearchResult(None, 0)
    f0 = table.f()
    trace = net.forward(f0, table.touched())
    steps = rng.integers(1, n + 1, size=cfg.chi)
    paths = candidate_paths(g, int(steps.max()), trace.critical_rows, cfg.tau, rng)

    keep = np.ones((cfg.chi * cfg.tau, n), dtype=bool)
    for si, s in enumerate(steps):
        for k, p in enumerate(paths):
            keep[si * cfg.tau + k, p[: min(int(s), len(p))]] = False
    out = net.output(table.f_many(keep))
    ok = np.flatnonzero(is_correct(out, y))
    if ok.size == 0:
        return SearchResult(None, cfg.chi * cfg.tau, list(steps), paths)
    first = int(ok[0])
    return SearchResult(
        keep[first].astype(np.float64),
        first + 1,
        list(steps),
        paths,
        (first // cfg.tau, first % cfg.tau),
    )


@dataclass
class TargetBatch:
    targets: list[np.ndarray | None]
    searched: int = 0
    found: int = 0
    logs: list[dict] = field(default_factory=list)


def generate_targets(
    samples,
    net: RuleNet,
    tables,
    graphs,
    assess=None,
    stage2: bool = False,
    cfg: SearchConfig = SearchConfig(),
    rng=None,
    workers: int = 1,
) -> TargetBatch:
    """Target masks for a batch of samples.

    Correctly classified samples keep the assessing model's own mask
    (stage 2) or the all-ones mask (stage 1); the rest get a greedy-search
    result, or ``None`` when the search fails (such samples should be left
    out of the assessing-model update).
    """
    if not samples:
        raise ValueError("generate_targets needs a non-empty batch")
    rngs = split_rng(rng, len(samples))
    current = []
    for s, tab in zip(samples, tables):
        if stage2 and assess is not None:
            m = assess.mask(s)
        else:
            m = np.ones(s.n_rows)
        current.append(m)
    outs = [float(net.output(tab.f(m))) for tab, m in zip(tables, current)]

    def job(i):
        s = samples[i]
        if is_correct(outs[i], s.y):
            return current[i].copy(), None
        res = greedy_search(s, net, graphs[i], cfg, rngs[i], tables[i])
        return res.mask, res

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(len(samples))))
    else:
        results = [job(i) for i in range(len(samples))]

    batch = TargetBatch([r[0] for r in results])
    for s, (mask, res) in zip(samples, results):
        if res is not None:
            batch.searched += 1
            batch.found += mask is not None
            batch.logs.append(res.log_record(s.sample_id))
    return batch

"""Acceptance criteria 1-9, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``);
one PASS/FAIL line per criterion is printed in the terminal summary.
"""

import csv
import io
import json
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import blocks_map
from oracles import bn_posterior_enumeration, fvalue_pixels, hypothesis_by_enumeration
from symseg.cli import main as cli_main
from symseg.dataset import LabelMap, LabelVocabulary, load_manifest, load_pairs
from symseg.engine import IAConfig, run_ia
from symseg.evaluation import fvalue, image_score
from symseg.features import (CategoryAttributeMeans, FeatureVector, discretize,
                             extract_image_features)
from symseg.reasoning import (CooccurrenceModel, build_graph, generate_hypothesis,
                              learn_cooccurrence)
from symseg.segmenters import PortfolioSpec, run_segmenter
from symseg.selector import (BayesSelector, LayeredBN, build_training_sets, select, train_bn,
                             train_margin)
from symseg.synth import generate_dataset, generate_scene

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# -- shared synthetic experiment ------------------------------------------------------

SEEDS = (0, 1, 2)
_EXPERIMENTS: dict[int, dict] = {}


def experiment(seed: int, root: Path) -> dict:
    """200-image dataset, training sets, margin selector and per-backend validation outputs."""
    if seed in _EXPERIMENTS:
        return _EXPERIMENTS[seed]
    t0 = time.perf_counter()
    manifest, portfolio_path = generate_dataset(root / f"data{seed}", n_images=200, seed=seed)
    man = load_manifest(manifest)
    portfolio = PortfolioSpec.load(portfolio_path)
    T_f, T_a = build_training_sets(load_pairs(man.split("train")), portfolio, theta=0.5)
    model = train_margin(T_f + T_a, portfolio.ids, n_pca=10, seed=seed)
    val = []
    for image, gt in load_pairs(man.split("val")):
        scores = {a: image_score(run_segmenter(portfolio, a, image), gt) for a in portfolio.ids}
        features = extract_image_features(image)
        val.append((image, gt, features, scores, select(model, features)[0]))
    _EXPERIMENTS[seed] = dict(portfolio=portfolio, samples=T_f + T_a, model=model, val=val,
                              seconds=time.perf_counter() - t0)
    return _EXPERIMENTS[seed]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


# -- 1 -------------------------------------------------------------------------------------

def _toy_hypothesis_instance(rng):
    n_cat = int(rng.integers(3, 7))
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(n_cat)))
    while True:
        blocks = []
        for _ in range(int(rng.integers(2, 5))):
            h, w = (int(v) for v in rng.integers(3, 10, 2))
            blocks.append((int(rng.integers(1, n_cat)), int(rng.integers(0, 24 - h)),
                           int(rng.integers(0, 24 - w)), h, w))
        graph = build_graph(blocks_map(vocab, (24, 24), blocks), min_region_px=1)
        if 2 <= len(graph) <= 4:
            break
    cats = tuple(vocab.names)
    model = CooccurrenceModel(cats, rng.dirichlet(np.ones(4), (n_cat, n_cat)),
                              rng.dirichlet(np.ones(3), (n_cat, n_cat)),
                              rng.dirichlet(np.ones(2), (n_cat, n_cat)),
                              rng.dirichlet(np.ones(8), n_cat), 1.0)
    return graph, model, int(rng.integers(len(graph))), bool(rng.random() < 0.7)


def _toy_bn_selector(rng):
    k = int(rng.integers(2, 4))
    n_in = int(rng.integers(1, 4))
    n_attr = int(rng.integers(0, n_in + 1))
    n_feat = n_in - n_attr
    n_cls = int(rng.integers(2, 4))
    hidden = rng.random() < 0.5
    if hidden:
        groups = [list(range(n_in))] if n_in < 3 else [[0, 1], [2]]
        bn = LayeredBN([k] * n_in, n_cls, groups, int(rng.integers(2, 4)))
        bn.hidden_cpts = [rng.dirichlet(np.ones(bn.hidden_states), c.shape[:-1])
                          for c in bn.hidden_cpts]
    else:
        bn = LayeredBN([k] * n_in, n_cls)
    bn.priors = [rng.dirichlet(np.ones(k)) for _ in range(n_in)]
    bn.class_cpt = rng.dirichlet(np.ones(n_cls), bn.class_cpt.shape[:-1])
    algos = [f"a{i}" for i in range(n_cls)]
    model = BayesSelector(algos, "toy", k, list(range(n_feat)), np.zeros(n_feat), np.ones(n_feat),
                          list(range(n_attr)), np.zeros(n_attr), np.ones(n_attr), bn,
                          np.zeros(12), CategoryAttributeMeans({}, {}, 21))
    codes = rng.integers(0, k, n_in)
    values = (codes + 0.5) / k
    feats = FeatureVector(values[:n_feat], "toy")
    attrs = None
    evidence = list(codes[:n_feat]) + [-1] * n_attr
    if n_attr and rng.random() < 0.5:
        attrs = np.zeros(12)
        attrs[:n_attr] = values[n_feat:]
        evidence[n_feat:] = codes[n_feat:]
    return model, feats, attrs, np.array(evidence)


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    n = 250
    for _ in range(n):
        graph, model, target, use_shape = _toy_hypothesis_instance(rng)
        h = generate_hypothesis(graph, model, graph.nodes[target].region_id, use_shape=use_shape)
        c, s = hypothesis_by_enumeration([nd.mask for nd in graph.nodes],
                                         [nd.category for nd in graph.nodes], target, model.p_pos,
                                         model.p_size, model.p_depth, model.p_shape, model.eps,
                                         model.shape_bins, use_shape=use_shape)
        mismatches += h.category != c or abs(h.score - s) > 1e-9 * s
    for _ in range(n):
        model, feats, attrs, ev = _toy_bn_selector(rng)
        bn = model.bn
        post = bn_posterior_enumeration(bn.input_states, bn.groups, bn.hidden_states, bn.priors,
                                        bn.hidden_cpts, bn.class_cpt, ev)
        algo, scores = select(model, feats, attrs)
        got = np.array([scores[a] for a in model.algorithms])
        mismatches += (algo != model.algorithms[int(np.argmax(post))]
                       or np.abs(got - post).max() > 1e-12)
    dt = time.perf_counter() - t0
    record(1, mismatches == 0 and dt < 60,
           f"{2 * n} instances, {mismatches} mismatches, {dt:.1f}s")


# -- 2 -------------------------------------------------------------------------------------

def test_criterion_2_selection_gain(workdir):
    lines, ok, total = [], True, 0.0
    for seed in SEEDS:
        exp = experiment(seed, workdir)
        total += exp["seconds"]
        ids = exp["portfolio"].ids
        backend = {a: np.mean([v[3][a] for v in exp["val"]]) for a in ids}
        oracle = np.mean([max(v[3].values()) for v in exp["val"]])
        chosen = np.mean([v[3][v[4]] for v in exp["val"]])
        worst = min(backend.values())
        ok_a = all(oracle >= b for b in backend.values())
        ok_b = chosen >= worst + 0.05
        ok &= ok_a and ok_b
        lines.append(f"seed {seed}: oracle {oracle:.3f}, selector {chosen:.3f}, "
                     f"worst {worst:.3f}, best {max(backend.values()):.3f}")
    record(2, ok and total < 600, "; ".join(lines) + f"; {total:.0f}s")


# -- 3 -------------------------------------------------------------------------------------

_COOC: dict = {}


def contradiction_cooc(voc) -> CooccurrenceModel:
    if "model" not in _COOC:
        rng = np.random.default_rng(123)
        _COOC["model"] = learn_cooccurrence([generate_scene(rng, voc)[1] for _ in range(1000)],
                                            alpha=0.1)
    return _COOC["model"]


def test_criterion_3_ia_loop(workdir, voc):
    exp = experiment(0, workdir)
    portfolio, selector = exp["portfolio"], exp["model"]
    t0 = time.perf_counter()
    cooc = contradiction_cooc(voc)
    rng = np.random.default_rng(7)
    gains, iterations, tried = [], [], 0
    while len(gains) < 40 and tried < 5000:
        tried += 1
        image, gt, _ = generate_scene(rng, voc)
        out, trace = run_ia(image, selector, cooc, portfolio, IAConfig())
        if "contradiction" not in trace.kinds():
            continue
        first = trace.of_kind("selection")[0]["algorithm"]
        gains.append(image_score(out, gt) - image_score(run_segmenter(portfolio, first, image), gt))
        iterations.append(trace.of_kind("final")[0]["iterations"])
    dt = time.perf_counter() - t0
    frac = float(np.mean(np.array(gains) >= 0)) if gains else 0.0
    ok = len(gains) >= 20 and frac >= 0.8 and max(iterations) <= len(portfolio.ids) and dt < 120
    record(3, ok, f"{len(gains)} scenarios, final >= initial in {100 * frac:.1f}%, "
                  f"mean gain {np.mean(gains):+.3f}, max iterations {max(iterations)}, {dt:.1f}s")


# -- 4 -------------------------------------------------------------------------------------

def _exact_bin(x, k, lo, hi):
    t = (Fraction(x) - Fraction(lo)) * k / (Fraction(hi) - Fraction(lo))
    c = -((-t.numerator) // t.denominator)
    return min(max(c, 1), k)


def test_criterion_4_discretization():
    rng = np.random.default_rng(4)
    violations = 0
    n = 10_000
    for _ in range(n):
        k = int(rng.integers(2, 13))
        lo = float(rng.uniform(-1e3, 1e3))
        hi = lo + float(rng.uniform(1e-3, 1e3))
        xs = np.sort(rng.uniform(lo - 0.2 * (hi - lo), hi + 0.2 * (hi - lo), 6))
        bins = discretize(xs, k, lo, hi)
        violations += bool(np.any(np.diff(bins) < 0) or bins.min() < 1 or bins.max() > k)
        violations += discretize(lo, k, lo, hi) != 1 or discretize(hi, k, lo, hi) != k
        # boundary sweep: points just inside each side of every edge, against exact arithmetic
        w = (hi - lo) / k
        for j in range(1, k):
            edge = lo + j * w
            for x in (edge - 1e-6 * w, edge + 1e-6 * w):
                violations += discretize(x, k, lo, hi) != _exact_bin(x, k, lo, hi)
    record(4, violations == 0, f"{n} tuples, {violations} violations")


# -- 5 -------------------------------------------------------------------------------------

def test_criterion_5_probability_hygiene(workdir, voc, cli_runs):
    worst, checked = 0.0, 0
    models = [contradiction_cooc(voc)]
    for path in sorted(workdir.glob("**/cooc.json")):
        models.append(CooccurrenceModel.load(path))
    for m in models:
        for table in (m.p_pos, m.p_size, m.p_depth, m.p_shape):
            worst = max(worst, float(np.abs(table.sum(axis=-1) - 1).max()))
            checked += table[..., 0].size
    exp = experiment(0, workdir)
    bn_model = train_bn(exp["samples"], exp["portfolio"].ids, k=6, seed=0)
    for cpt in bn_model.bn.cpts():
        worst = max(worst, float(np.abs(cpt.sum(axis=-1) - 1).max()))
        checked += cpt[..., 0].size
    for v in exp["val"][:20]:
        worst = max(worst, abs(sum(select(bn_model, v[2])[1].values()) - 1))
        checked += 1
    record(5, worst <= 1e-9, f"{checked} distributions, max |sum - 1| = {worst:.2e}")


# -- 6 -------------------------------------------------------------------------------------

def test_criterion_6_fvalue_oracle():
    rng = np.random.default_rng(6)
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(5)))
    mismatches = 0
    for _ in range(100):
        p = LabelMap(rng.integers(0, 5, (32, 32)).astype(np.uint8), vocab)
        g = LabelMap(rng.integers(0, 5, (32, 32)).astype(np.uint8), vocab)
        for c in range(5):
            mismatches += fvalue(p, g, c) != fvalue_pixels(p.pixels, g.pixels, c)
    record(6, mismatches == 0, f"100 map pairs x 5 categories, {mismatches} mismatches")


# -- 7 -------------------------------------------------------------------------------------

def test_criterion_7_patching_invariance(workdir):
    exp = experiment(0, workdir)
    model = exp["model"]
    rng = np.random.default_rng(7)
    bad = 0
    queries = [v[2] for v in exp["val"]]
    while len(queries) < 100:
        base = queries[int(rng.integers(len(exp["val"])))].values
        queries.append(FeatureVector(np.clip(base + rng.normal(0, 0.01, base.size), 0, None),
                                     model.schema_id))
    for f in queries[:100]:
        a = select(model, f)
        b = select(model, f, model.attr_means.copy())
        bad += a[0] != b[0] or any(np.float64(a[1][k]).tobytes() != np.float64(b[1][k]).tobytes()
                                   for k in a[1])
    record(7, bad == 0, f"100 queries, {bad} differences")


# -- 8 and 9 -------------------------------------------------------------------------------------

def _cli(*argv):
    code = cli_main([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def cli_runs(workdir):
    root = workdir / "cli"
    data = root / "data"
    _cli("synth-gen", "--out", data, "--n-images", 80, "--seed", 5)
    man, port = data / "manifest.tsv", data / "portfolio.json"
    _cli("train-cooc", "--manifest", man, "--out", root / "cooc.json")
    _cli("train-selector", "--manifest", man, "--portfolio", port, "--out", root / "sel.json")
    for name in ("a", "b"):
        _cli("run", "--manifest", man, "--portfolio", port, "--selector", root / "sel.json",
             "--cooc", root / "cooc.json", "--out", root / f"run_{name}", "--seed", 0)
        _cli("report", "--manifest", man, "--portfolio", port, "--run-dir", root / f"run_{name}",
             "--out", root / f"report_{name}")
    return root, port


def _no_timestamps(text):
    return [{k: v for k, v in json.loads(line).items() if k != "timestamp"}
            for line in text.splitlines()]


def test_criterion_8_determinism(cli_runs):
    root, _ = cli_runs
    a, b = root / "run_a", root / "run_b"
    diffs = 0
    maps = sorted((a / "maps").glob("*.png"))
    for m in maps:
        diffs += m.read_bytes() != (b / "maps" / m.name).read_bytes()
    for t in sorted((a / "traces").glob("*.jsonl")):
        diffs += _no_timestamps(t.read_text()) != _no_timestamps((b / "traces" / t.name).read_text())
    diffs += (a / "run.tsv").read_bytes() != (b / "run.tsv").read_bytes()
    for name in ("report.csv", "report.json"):
        diffs += ((root / "report_a" / name).read_bytes()
                  != (root / "report_b" / name).read_bytes())
    record(8, diffs == 0 and len(maps) > 0, f"{len(maps)} maps + traces + reports, {diffs} differ")


def test_criterion_9_report_shape(cli_runs, voc):
    root, port = cli_runs
    rows = list(csv.reader(io.StringIO((root / "report_a" / "report.csv").read_text())))
    methods = ["IA", *PortfolioSpec.load(port).ids]
    ok = (rows[0] == ["class", *methods] and len(rows) == 23
          and [r[0] for r in rows[1:22]] == list(voc.names) and rows[22][0] == "average"
          and all(len(r) == 1 + len(methods) for r in rows))
    record(9, ok, f"{len(rows) - 2} category rows + average, columns {rows[0][1:]}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

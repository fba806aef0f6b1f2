"""Command-line entry point: ``symseg <command>``.

Every command takes ``--config FILE`` (a JSON object of option values); flags
given on the command line win over the file, the file wins over built-in
defaults. The effective configuration is written next to the outputs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import json
import logging
import sys
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from .dataset import (DatasetError, LabelMap, filter_multi_object, load_manifest, load_pairs,
                      read_image, read_label_map, write_label_map)
from .engine import MERGE_MODES, IAConfig, IAError, run_ia
from .evaluation import EvalError, portfolio_report
from .reasoning import CooccurrenceModel, learn_cooccurrence
from .segmenters import PortfolioSpec, SegmenterError, run_segmenter
from .selector import (EMConvergenceWarning, build_training_sets, load_model, save_model, select,
                       train_bn, train_margin)
from .selector.samples import BuildStats
from .synth import generate_dataset

log = logging.getLogger("symseg")

DEFAULTS = {
    "synth-gen": {"out": None, "n_images": 200, "seed": 0, "size": 64, "val_fraction": 0.3},
    "train-cooc": {"manifest": None, "out": None, "split": "train", "alpha": 0.1, "eps": 0.2,
                   "shape_bins": 8, "min_region_px": 25},
    "train-selector": {"manifest": None, "portfolio": None, "out": None, "split": "train",
                       "variant": "margin", "theta": 0.5, "n_pca": 10, "C": 1.0,
                       "margin_mode": "patch", "k": 6, "max_feature_nodes": 10,
                       "max_attribute_nodes": 4, "fan_in": 5, "holdout": 0.2, "seed": 0,
                       "min_region_px": 25},
    "run": {"manifest": None, "portfolio": None, "selector": None, "cooc": None, "out": None,
            "split": "val", "tau": 0.15, "max_iterations": None, "dilation": 2,
            "merge_mode": "region", "use_shape": True, "oracle_guard": False, "seed": 0,
            "jobs": 1, "min_region_px": 25},
    "report": {"manifest": None, "portfolio": None, "run_dir": None, "out": None,
               "split": "val", "pooling": "micro", "jobs": 1},
}

REQUIRED = {
    "synth-gen": ("out",),
    "train-cooc": ("manifest", "out"),
    "train-selector": ("manifest", "portfolio", "out"),
    "run": ("manifest", "portfolio", "selector", "cooc", "out"),
    "report": ("manifest", "portfolio", "run_dir", "out"),
}


class RunFailure(Exception):
    """Runtime failure reported with exit code 2."""


def effective_config(command: str, config_file: str | None, flags: dict) -> dict:
    cfg = dict(DEFAULTS[command])
    if config_file:
        try:
            loaded = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise click.BadParameter(f"cannot read config {config_file}: {exc}",
                                     param_hint="--config")
        if not isinstance(loaded, dict):
            raise click.BadParameter("config file must hold a JSON object", param_hint="--config")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise click.BadParameter(f"unknown keys for {command}: {', '.join(unknown)}",
                                     param_hint="--config")
        cfg.update(loaded)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise click.UsageError(f"missing required option(s): "
                               f"{', '.join('--' + m.replace('_', '-') for m in missing)}")
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    checks = [
        ("theta", lambda v: v >= 0, "must be >= 0"),
        ("tau", lambda v: v >= 0, "must be >= 0"),
        ("alpha", lambda v: v >= 0, "must be >= 0"),
        ("eps", lambda v: v >= 0, "must be >= 0"),
        ("k", lambda v: v >= 2, "must be >= 2"),
        ("n_pca", lambda v: v >= 1, "must be >= 1"),
        ("C", lambda v: v > 0, "must be > 0"),
        ("jobs", lambda v: v >= 1, "must be >= 1"),
        ("n_images", lambda v: v >= 1, "must be >= 1"),
        ("holdout", lambda v: 0 <= v < 1, "must be in [0, 1)"),
        ("max_iterations", lambda v: v is None or v >= 1, "must be >= 1"),
        ("variant", lambda v: v in ("margin", "bn"), "must be margin or bn"),
        ("margin_mode", lambda v: v in ("patch", "split"), "must be patch or split"),
        ("merge_mode", lambda v: v in MERGE_MODES, f"must be one of {MERGE_MODES}"),
        ("pooling", lambda v: v in ("micro", "macro"), "must be micro or macro"),
    ]
    for key, ok, msg in checks:
        if key in cfg and not ok(cfg[key]):
            raise click.BadParameter(f"{cfg[key]!r} {msg}", param_hint=f"--{key.replace('_', '-')}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split(manifest_path: str, split: str):
    man = load_manifest(manifest_path)
    part = man.split(split)
    if not len(part):
        raise RunFailure(f"manifest {manifest_path} has no entries in split {split!r}")
    return man, part


def _stems(manifest) -> list[str]:
    stems = [e.image_path.stem for e in manifest.entries]
    dup = [s for s, n in Counter(stems).items() if n > 1]
    if dup:
        raise RunFailure(f"duplicate image names in manifest: {', '.join(sorted(dup)[:5])}")
    return stems


# -- worker pool -------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)


def _pool_map(fn, items, jobs: int, state: dict) -> list:
    """Ordered map over ``items``; results come back in input order."""
    if jobs <= 1:
        _init_worker(state)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(state,)) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _ia_one(entry):
    w = _WORKER
    image = read_image(entry.image_path)
    gt = read_label_map(entry.gt_path, w["portfolio"].vocab) if w["config"].oracle_guard else None
    try:
        out, trace = run_ia(image, w["selector"], w["cooc"], w["portfolio"], w["config"], gt)
    except (IAError, SegmenterError) as exc:
        return None, None, str(exc)
    return out.pixels, trace.to_jsonl(), None


def _methods_one(entry):
    w = _WORKER
    image = read_image(entry.image_path)
    outs, errors = {}, {}
    for a in w["portfolio"].ids:
        try:
            outs[a] = run_segmenter(w["portfolio"], a, image).pixels
        except SegmenterError as exc:
            errors[a] = str(exc)
    return outs, errors


# -- commands ------------------------------------------------------------------------

@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose):
    """Algorithm selection and iterative analysis for symbolic segmentation."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("synth-gen")
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--n-images", type=int)
@click.option("--seed", type=int)
@click.option("--size", type=int)
@click.option("--val-fraction", type=float)
def synth_gen(config_file, **flags):
    """Write a synthetic dataset and its complementary noisy-oracle portfolio."""
    cfg = effective_config("synth-gen", config_file, flags)
    manifest, portfolio = generate_dataset(cfg["out"], cfg["n_images"], cfg["seed"], cfg["size"],
                                           cfg["val_fraction"])
    _write_json(Path(cfg["out"]) / "synth-gen.config.json", cfg)
    click.echo(f"manifest: {manifest}\nportfolio: {portfolio}")


@cli.command("train-cooc")
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--split")
@click.option("--alpha", type=float)
@click.option("--eps", type=float)
@click.option("--shape-bins", type=int)
@click.option("--min-region-px", type=int)
def train_cooc(config_file, **flags):
    """Learn pairwise relation statistics from ground-truth maps."""
    cfg = effective_config("train-cooc", config_file, flags)
    man, part = _split(cfg["manifest"], cfg["split"])
    maps = [read_label_map(e.gt_path, man.vocab) for e in part.entries]
    model = learn_cooccurrence(maps, cfg["alpha"], cfg["eps"], cfg["shape_bins"],
                               cfg["min_region_px"])
    if model.n_graphs == 0:
        raise RunFailure("no ground-truth map has two or more regions")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _write_json(out.with_suffix(".config.json"), cfg)
    click.echo(f"co-occurrence model over {model.n_graphs} graphs: {out}")


def _holdout_error(samples, ids, cfg, train_fn) -> float | None:
    n = len(samples)
    n_test = int(round(cfg["holdout"] * n))
    if n_test == 0:
        return None
    order = np.random.default_rng(cfg["seed"]).permutation(n)
    test, train = [samples[i] for i in order[:n_test]], [samples[i] for i in order[n_test:]]
    if len({s.label for s in train}) < 2:
        return None
    model = train_fn(train)
    wrong = sum(select(model, s.features, s.attributes)[0] != s.label for s in test)
    return wrong / n_test


@cli.command("train-selector")
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--portfolio", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False))
@click.option("--split")
@click.option("--variant", type=click.Choice(["margin", "bn"]))
@click.option("--theta", type=float)
@click.option("--n-pca", type=int)
@click.option("--C", "C", type=float)
@click.option("--margin-mode", type=click.Choice(["patch", "split"]))
@click.option("--k", type=int)
@click.option("--max-feature-nodes", type=int)
@click.option("--max-attribute-nodes", type=int)
@click.option("--fan-in", type=int)
@click.option("--holdout", type=float)
@click.option("--seed", type=int)
@click.option("--min-region-px", type=int)
def train_selector(config_file, **flags):
    """Build T_f/T_a and train the algorithm selector."""
    cfg = effective_config("train-selector", config_file, flags)
    portfolio = PortfolioSpec.load(cfg["portfolio"])
    _, part = _split(cfg["manifest"], cfg["split"])
    part = filter_multi_object(part, cfg["min_region_px"])
    if not len(part):
        raise RunFailure("no multi-object training images")
    stats = BuildStats()
    T_f, T_a = build_training_sets(load_pairs(part), portfolio, theta=cfg["theta"],
                                   min_region_px=cfg["min_region_px"], stats=stats)
    samples = T_f + T_a
    if len({s.label for s in samples}) < 2:
        raise RunFailure(f"training set has fewer than two labels ({len(samples)} samples); "
                         f"try a lower --theta")
    ids = portfolio.ids
    n_cat = len(portfolio.vocab)
    if cfg["variant"] == "margin":
        def fit(T):
            return train_margin(T, ids, cfg["n_pca"], cfg["C"], cfg["seed"], cfg["margin_mode"],
                                n_cat)
    else:
        def fit(T):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EMConvergenceWarning)
                return train_bn(T, ids, cfg["k"], cfg["max_feature_nodes"],
                                cfg["max_attribute_nodes"], cfg["fan_in"], seed=cfg["seed"],
                                n_categories=n_cat)
    holdout = _holdout_error(samples, ids, cfg, fit)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EMConvergenceWarning)
        model = fit(samples)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    summary = {
        "variant": cfg["variant"], "images": stats.images, "skipped_failures": stats.skipped_failures,
        "skipped_undetected": stats.skipped_undetected, "T_f": len(T_f), "T_a": len(T_a),
        "labels": {a: sum(s.label == a for s in samples) for a in ids},
        "holdout_error": holdout,
    }
    if cfg["variant"] == "bn":
        summary.update(k=cfg["k"], em_iterations=model.em.n_iter, em_converged=model.em.converged,
                       feature_nodes=len(model.feature_idx), attribute_nodes=len(model.attr_idx))
        if caught:
            summary["warnings"] = [str(w.message) for w in caught]
    _write_json(out.with_suffix(".summary.json"), summary)
    _write_json(out.with_suffix(".config.json"), cfg)
    click.echo(json.dumps(summary, sort_keys=True))


@cli.command("run")
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--portfolio", type=click.Path(dir_okay=False))
@click.option("--selector", type=click.Path(dir_okay=False))
@click.option("--cooc", type=click.Path(dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--split")
@click.option("--tau", type=float)
@click.option("--max-iterations", type=int)
@click.option("--dilation", type=int)
@click.option("--merge-mode", type=click.Choice(MERGE_MODES))
@click.option("--shape/--no-shape", "use_shape", default=None)
@click.option("--oracle-guard/--no-oracle-guard", default=None)
@click.option("--seed", type=int)
@click.option("--jobs", type=int)
@click.option("--min-region-px", type=int)
def run(config_file, **flags):
    """Run iterative analysis over a split; write label maps and traces."""
    cfg = effective_config("run", config_file, flags)
    for key in ("selector", "cooc", "portfolio"):
        if not Path(cfg[key]).is_file():
            raise RunFailure(f"{key} file not found: {cfg[key]}")
    portfolio = PortfolioSpec.load(cfg["portfolio"])
    selector = load_model(cfg["selector"])
    cooc = CooccurrenceModel.load(cfg["cooc"])
    config = IAConfig(tau=cfg["tau"], max_iterations=cfg["max_iterations"],
                      dilation=cfg["dilation"], merge_mode=cfg["merge_mode"],
                      use_shape=cfg["use_shape"], oracle_guard=cfg["oracle_guard"],
                      min_region_px=cfg["min_region_px"])
    _, part = _split(cfg["manifest"], cfg["split"])
    stems = _stems(part)
    out = Path(cfg["out"])
    (out / "maps").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    state = {"portfolio": portfolio, "selector": selector, "cooc": cooc, "config": config}
    results = _pool_map(_ia_one, list(part.entries), cfg["jobs"], state)
    rows = ["image\tstatus\tinitial\tfinal_iterations\tmerges"]
    failures = 0
    for stem, (pixels, trace_text, error) in zip(stems, results):
        if error is not None:
            failures += 1
            rows.append(f"{stem}\tfailed: {error}\t\t\t")
            continue
        write_label_map(out / "maps" / f"{stem}.png", LabelMap(pixels, portfolio.vocab))
        (out / "traces" / f"{stem}.jsonl").write_text(trace_text)
        events = [json.loads(line) for line in trace_text.splitlines()]
        initial = next(e["payload"]["algorithm"] for e in events if e["kind"] == "segmentation")
        final = next(e["payload"] for e in events if e["kind"] == "final")
        merges = sum(e["kind"] == "merge" and e["payload"]["accepted"] for e in events)
        rows.append(f"{stem}\tok\t{initial}\t{final['iterations']}\t{merges}")
    (out / "run.tsv").write_text("\n".join(rows) + "\n")
    _write_json(out / "run.config.json", cfg)
    click.echo(f"{len(stems) - failures}/{len(stems)} images processed -> {out}")
    if failures:
        click.echo(f"{failures} image(s) failed; see {out / 'run.tsv'}", err=True)
        if failures == len(stems):
            raise RunFailure("every image failed")


@cli.command("report")
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False))
@click.option("--portfolio", type=click.Path(dir_okay=False))
@click.option("--run-dir", type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(file_okay=False))
@click.option("--split")
@click.option("--pooling", type=click.Choice(["micro", "macro"]))
@click.option("--jobs", type=int)
def report(config_file, **flags):
    """Per-category f-values for IA and every portfolio member (CSV + JSON)."""
    cfg = effective_config("report", config_file, flags)
    portfolio = PortfolioSpec.load(cfg["portfolio"])
    man, part = _split(cfg["manifest"], cfg["split"])
    stems = _stems(part)
    run_dir = Path(cfg["run_dir"])
    gts = [read_label_map(e.gt_path, man.vocab) for e in part.entries]
    ia = []
    for stem in stems:
        p = run_dir / "maps" / f"{stem}.png"
        if not p.is_file():
            raise RunFailure(f"missing IA result for {stem} in {run_dir}")
        ia.append(read_label_map(p, man.vocab))
    per_image = _pool_map(_methods_one, list(part.entries), cfg["jobs"], {"portfolio": portfolio})
    results = {"IA": ia}
    for a in portfolio.ids:
        maps = []
        for stem, (outs, errors) in zip(stems, per_image):
            if a in errors:
                raise RunFailure(f"{a} failed on {stem}: {errors[a]}")
            maps.append(LabelMap(outs[a], man.vocab))
        results[a] = maps
    rep = portfolio_report(gts, results, man.vocab, stems, cfg["pooling"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(rep.to_csv())
    (out / "report.json").write_text(rep.to_json())
    _write_json(out / "report.config.json", cfg)
    click.echo(rep.to_csv(), nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="symseg", standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except (RunFailure, DatasetError, SegmenterError, IAError, EvalError, ValueError, KeyError,
            OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:  # unexpected: still a runtime failure, keep the traceback
        log.exception("unexpected failure")
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()

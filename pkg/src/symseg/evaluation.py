"""Pixel f-measure scoring and Table-7-style portfolio reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import LabelMap, LabelVocabulary


class EvalError(Exception):
    pass


def _pixels(m) -> np.ndarray:
    return m.pixels if isinstance(m, LabelMap) else np.asarray(m)


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _pixels(pred), _pixels(gt)
    if p.shape != g.shape:
        raise EvalError(f"dimension mismatch: prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def f_from_counts(tp: int, fp: int, fn: int) -> float | None:
    """F = 2PR/(P+R); ``None`` when the category appears in neither map."""
    if tp + fp + fn == 0:
        return None
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def confusion_counts(pred, gt, category: int) -> tuple[int, int, int]:
    p, g = _check(pred, gt)
    pc, gc = p == category, g == category
    tp = int(np.count_nonzero(pc & gc))
    return tp, int(np.count_nonzero(pc)) - tp, int(np.count_nonzero(gc)) - tp


def fvalue(pred, gt, category: int) -> float | None:
    return f_from_counts(*confusion_counts(pred, gt, category))


def image_score(pred, gt) -> float:
    """Mean f-value over the categories present in the ground truth."""
    p, g = _check(pred, gt)
    cats = np.unique(g)
    return float(np.mean([fvalue(p, g, int(c)) for c in cats]))


def oracle_choice(outputs: Mapping[str, LabelMap], gt, order: Sequence[str]) -> str:
    """Best method for one image by image score; ties go to the earlier method in ``order``."""
    best, best_score = None, -1.0
    for m in order:
        s = image_score(outputs[m], gt)
        if s > best_score:
            best, best_score = m, s
    return best


@dataclass
class EvalReport:
    methods: list[str]
    categories: list[str]
    per_category: dict[str, dict[str, float | None]]   # method -> category -> F
    averages: dict[str, float]                          # mean over present categories
    per_image: dict[str, list[float]]                   # method -> image scores
    mean_image_score: dict[str, float]
    wins: dict[str, int]
    image_ids: list[str] = field(default_factory=list)
    pooling: str = "micro"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *self.methods])
        for cat in self.categories:
            w.writerow([cat, *(_pct(self.per_category[m][cat]) for m in self.methods)])
        w.writerow(["average", *(_pct(self.averages[m]) for m in self.methods)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"format": "symseg.report", "version": 1, "pooling": self.pooling,
                "methods": self.methods, "categories": self.categories,
                "per_category": self.per_category, "averages": self.averages,
                "mean_image_score": self.mean_image_score, "wins": self.wins,
                "images": self.image_ids, "per_image": self.per_image}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _pct(v: float | None) -> str:
    return "" if v is None else f"{100 * v:.3f}"


def portfolio_report(gts: Sequence[LabelMap], results: Mapping[str, Sequence[LabelMap]],
                     vocab: LabelVocabulary, image_ids: Sequence[str] | None = None,
                     pooling: str = "micro") -> EvalReport:
    """Aggregate per-category and per-image scores for every method.

    ``results`` maps method name to one label map per ground truth, in order.
    ``pooling="micro"`` sums pixel counts over the dataset before computing F;
    ``"macro"`` averages per-image F values. Categories never seen by a method
    in either map are reported as absent (``None``), not zero.
    """
    if not gts:
        raise EvalError("empty dataset")
    if pooling not in ("micro", "macro"):
        raise ValueError(f"unknown pooling {pooling!r}")
    methods = list(results)
    for m in methods:
        if len(results[m]) != len(gts):
            raise EvalError(f"method {m}: {len(results[m])} results for {len(gts)} images")
        for i, r in enumerate(results[m]):
            if r is None:
                raise EvalError(f"method {m}: missing result for image {i}")
    n_cat = len(vocab)
    per_category, averages, per_image, mean_img = {}, {}, {}, {}
    for m in methods:
        counts = np.zeros((n_cat, 3), dtype=np.int64)
        macro: list[list[float]] = [[] for _ in range(n_cat)]
        scores = []
        for pred, gt in zip(results[m], gts):
            p, g = _check(pred, gt)
            for c in range(n_cat):
                tp, fp, fn = confusion_counts(p, g, c)
                counts[c] += (tp, fp, fn)
                f = f_from_counts(tp, fp, fn)
                if f is not None:
                    macro[c].append(f)
            scores.append(image_score(p, g))
        cat_f = {}
        for c, name in enumerate(vocab.names):
            if pooling == "micro":
                cat_f[name] = f_from_counts(*counts[c])
            else:
                cat_f[name] = float(np.mean(macro[c])) if macro[c] else None
        per_category[m] = cat_f
        present = [v for v in cat_f.values() if v is not None]
        averages[m] = float(np.mean(present)) if present else 0.0
        per_image[m] = scores
        mean_img[m] = float(np.mean(scores))
    wins = {m: 0 for m in methods}
    for i in range(len(gts)):
        best = max(per_image[m][i] for m in methods)
        for m in methods:
            if per_image[m][i] == best:
                wins[m] += 1
    return EvalReport(methods, list(vocab.names), per_category, averages, per_image, mean_img,
                      wins, list(image_ids or [str(i) for i in range(len(gts))]), pooling)

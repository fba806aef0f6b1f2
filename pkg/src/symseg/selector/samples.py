"""Training-set construction for the algorithm selector."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..dataset import DatasetManifest, LabelMap, Region, extract_regions, load_pairs
from ..evaluation import fvalue, image_score
from ..features import FeatureConfig, FeatureVector, extract_image_features, extract_region_attributes
from ..segmenters import PortfolioSpec, SegmenterError, run_segmenter

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    features: FeatureVector
    attributes: np.ndarray | None
    label: str
    gap: float
    category: int | None = None
    image_index: int = -1

    def __post_init__(self):
        if self.gap < 0:
            raise ValueError("gap must be >= 0")


def ranked_gap(scores: Sequence[float], ids: Sequence[str]) -> tuple[str, float]:
    """Best id (earliest on ties) and its margin over the runner-up."""
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
    best = order[0]
    second = scores[order[1]] if len(order) > 1 else 0.0
    return ids[best], float(scores[best] - second)


@dataclass
class BuildStats:
    images: int = 0
    skipped_failures: int = 0
    skipped_undetected: int = 0
    candidates_f: int = 0
    candidates_a: int = 0


def build_training_sets(data: DatasetManifest | Iterable[tuple[np.ndarray, LabelMap]],
                        portfolio: PortfolioSpec,
                        eval_oracle: Callable[[LabelMap, LabelMap], float] = image_score,
                        theta: float = 0.5, feature_config: FeatureConfig | None = None,
                        min_region_px: int = 25, require_detection: bool = True,
                        stats: BuildStats | None = None,
                        outputs_cache: dict | None = None
                        ) -> tuple[list[TrainingSample], list[TrainingSample]]:
    """Whole-image samples (T_f) and ground-truth box samples (T_a).

    An image or box is kept only when the best algorithm beats the runner-up
    by at least ``theta`` (and strictly by more than zero). With
    ``require_detection`` an image contributes only if some algorithm finds
    two or more regions in it.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    config = feature_config or FeatureConfig()
    pairs = load_pairs(data) if isinstance(data, DatasetManifest) else data
    stats = stats if stats is not None else BuildStats()
    ids = portfolio.ids
    T_f: list[TrainingSample] = []
    T_a: list[TrainingSample] = []
    for idx, (image, gt) in enumerate(pairs):
        stats.images += 1
        try:
            outs = {}
            for a in ids:
                key = (idx, a)
                if outputs_cache is not None and key in outputs_cache:
                    outs[a] = outputs_cache[key]
                else:
                    outs[a] = run_segmenter(portfolio, a, image)
                    if outputs_cache is not None:
                        outputs_cache[key] = outs[a]
        except SegmenterError as exc:
            log.warning("image %d skipped: %s", idx, exc)
            stats.skipped_failures += 1
            continue
        if require_detection and not any(
                len(extract_regions(outs[a], min_region_px)) >= 2 for a in ids):
            stats.skipped_undetected += 1
            continue

        scores = [eval_oracle(outs[a], gt) for a in ids]
        label, gap = ranked_gap(scores, ids)
        stats.candidates_f += 1
        if gap >= theta and gap > 0:
            T_f.append(TrainingSample(extract_image_features(image, config), None, label, gap,
                                      None, idx))

        for region in extract_regions(gt, min_region_px):
            stats.candidates_a += 1
            sample = _region_sample(region, image, gt, outs, ids, theta, config, idx)
            if sample is not None:
                T_a.append(sample)
    return T_f, T_a


def _region_sample(region: Region, image, gt: LabelMap, outs, ids, theta, config, idx):
    gt_box = region.crop(gt.pixels)
    scores = []
    for a in ids:
        f = fvalue(region.crop(outs[a].pixels), gt_box, region.category)
        scores.append(0.0 if f is None else f)
    label, gap = ranked_gap(scores, ids)
    if gap < theta or gap <= 0:
        return None
    feats = extract_image_features(region.crop(image), config)
    attrs = extract_region_attributes(region.mask).vector()
    return TrainingSample(feats, attrs, label, gap, region.category, idx)

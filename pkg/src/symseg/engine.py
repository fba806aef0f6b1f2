"""The iterative analysis loop: select, segment, verify, hypothesize, re-select, merge."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from scipy import ndimage

from .dataset import LabelMap, Region, extract_regions
from .evaluation import image_score
from .features import FeatureConfig, extract_image_features
from .reasoning import CooccurrenceModel, consistency_scores, generate_hypothesis, graph_from_regions
from .segmenters import PortfolioSpec, SegmenterError, run_segmenter
from .selector.model import SelectorModel, select

log = logging.getLogger(__name__)

MERGE_MODES = ("region", "image")


class IAError(RuntimeError):
    pass


@dataclass(frozen=True)
class IAConfig:
    tau: float = 0.15
    max_iterations: int | None = None   # None: portfolio size
    dilation: int = 2
    merge_mode: str = "region"
    use_shape: bool = True
    oracle_guard: bool = False
    score_mode: str = "geometric"
    bbox_quant: int = 8
    eps: float | None = None            # None: the co-occurrence model's own
    min_region_px: int = 25

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.dilation < 0 or self.bbox_quant < 1:
            raise ValueError("dilation must be >= 0 and bbox_quant >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceEvent:
    kind: str
    payload: dict
    timestamp: float


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)

    def add(self, kind: str, **payload: Any) -> None:
        self.events.append(TraceEvent(kind, payload, time.time()))

    def kinds(self) -> list[str]:
        return [e.kind for e in self.events]

    def of_kind(self, kind: str) -> list[dict]:
        return [e.payload for e in self.events if e.kind == kind]

    def to_jsonl(self, timestamps: bool = True) -> str:
        lines = []
        for e in self.events:
            rec = {"kind": e.kind, "payload": e.payload}
            if timestamps:
                rec["timestamp"] = e.timestamp
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        events = []
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                events.append(TraceEvent(rec["kind"], rec["payload"], rec.get("timestamp", 0.0)))
        return cls(events)


@dataclass
class IAState:
    current: LabelMap
    source: np.ndarray                    # per-pixel index of the producing algorithm
    tried: set[tuple[tuple, str]] = field(default_factory=set)
    history: dict[tuple, list[int]] = field(default_factory=dict)
    iteration: int = 0
    trace: Trace = field(default_factory=Trace)


def region_signature(category: int, bbox: tuple[int, int, int, int], quant: int = 8) -> tuple:
    x, y, w, h = bbox
    return (int(category),) + tuple(int(v) // quant for v in (x, y, x + w, y + h))


def merge_region(current: LabelMap, replacement: LabelMap, mask: np.ndarray,
                 radius: int = 2) -> LabelMap:
    """Take ``replacement``'s labels inside ``mask`` dilated by ``radius`` pixels."""
    if current.shape != replacement.shape or np.shape(mask) != current.shape:
        raise ValueError("merge needs maps and mask of identical dimensions")
    if current.vocab != replacement.vocab:
        raise ValueError("merge needs maps over the same vocabulary")
    region = np.asarray(mask, dtype=bool)
    if radius > 0 and region.any():
        region = ndimage.binary_dilation(region, structure=ndimage.generate_binary_structure(2, 1),
                                         iterations=radius)
    out = np.where(region, replacement.pixels, current.pixels)
    return LabelMap(out.astype(np.uint8), current.vocab)


def _run(portfolio, algo, image, outputs, failed, trace):
    if algo in outputs:
        return outputs[algo]
    try:
        out = run_segmenter(portfolio, algo, image)
    except SegmenterError as exc:
        log.warning("backend %s failed: %s", algo, exc)
        failed.add(algo)
        trace.add("backend_failure", algorithm=algo, error=str(exc))
        return None
    outputs[algo] = out
    return out


def _rounded(scores: dict[str, float]) -> dict[str, float]:
    return {k: float(v) for k, v in scores.items()}


def run_ia(image: np.ndarray, selector: SelectorModel, cooc: CooccurrenceModel,
           portfolio: PortfolioSpec, config: IAConfig | None = None,
           gt: LabelMap | None = None,
           feature_config: FeatureConfig | None = None) -> tuple[LabelMap, Trace]:
    """Segment one image, repairing implausible regions with other algorithms.

    ``gt`` is only consulted when ``config.oracle_guard`` is set.
    """
    config = config or IAConfig()
    if config.oracle_guard and gt is None:
        raise ValueError("oracle_guard needs the ground truth")
    fconf = feature_config or FeatureConfig()
    ids = portfolio.ids
    if list(selector.algorithms) != ids:
        raise IAError(f"selector trained for {selector.algorithms}, portfolio has {ids}")
    max_iter = config.max_iterations or len(ids)
    eps = cooc.eps if config.eps is None else config.eps
    background = portfolio.vocab.background_id
    trace = Trace()
    outputs: dict[str, LabelMap] = {}
    failed: set[str] = set()

    # first pass: whole-image features, attributes patched
    features = extract_image_features(image, fconf)
    first = None
    while first is None:
        algo, scores = select(selector, features, None, exclude=failed)
        if algo is None:
            trace.add("error", reason="all algorithms failed")
            raise IAError("every algorithm in the portfolio failed on this image")
        trace.add("selection", iteration=1, algorithm=algo, scores=_rounded(scores), query="image")
        first = _run(portfolio, algo, image, outputs, failed, trace)
    state = IAState(first, np.full(first.shape, ids.index(algo), dtype=np.int16), trace=trace)
    state.iteration = 1
    trace.add("segmentation", iteration=1, algorithm=algo)

    while True:
        regions = extract_regions(state.current, config.min_region_px)
        if len(regions) < 2:
            trace.add("stop", reason="fewer than two regions", iteration=state.iteration)
            break
        graph = graph_from_regions(regions, state.current.shape, eps, cooc.shape_bins)
        scores, global_score = consistency_scores(graph, cooc, config.use_shape, config.score_mode)
        trace.add("verification", iteration=state.iteration, global_score=global_score,
                  region_scores={str(k): v for k, v in sorted(scores.items())})
        if state.iteration >= max_iter:
            trace.add("stop", reason="iteration limit", iteration=state.iteration)
            break

        by_id = {r.id: r for r in regions}
        target = None
        for s, rid in sorted((s, rid) for rid, s in scores.items() if s < config.tau):
            reg = by_id[rid]
            sig = region_signature(reg.category, _bbox(reg), config.bbox_quant)
            src = ids[Counter(state.source[reg.mask].tolist()).most_common(1)[0][0]]
            state.tried.add((sig, src))
            untried = [a for a in ids if (sig, a) not in state.tried and a not in failed]
            if untried:
                target = (reg, sig, s)
                break
        if target is None:
            trace.add("stop", reason="no contradiction with untried algorithms",
                      iteration=state.iteration)
            break
        reg, sig, s = target
        trace.add("contradiction", iteration=state.iteration, region_id=reg.id,
                  category=reg.category, score=s, bbox=list(_bbox(reg)))

        hyp = generate_hypothesis(graph, cooc, reg.id, background, config.use_shape,
                                  config.score_mode)
        state.history.setdefault(sig, []).append(hyp.category)
        attrs = selector.category_means.mean(hyp.category)
        trace.add("hypothesis", iteration=state.iteration, region_id=reg.id,
                  category=hyp.category, score=hyp.score, attributes_known=attrs is not None)

        box_features = extract_image_features(reg.crop(image), fconf)
        exclude = {a for a in ids if (sig, a) in state.tried} | failed
        algo, sel_scores = select(selector, box_features, attrs, exclude=exclude)
        state.iteration += 1
        trace.add("selection", iteration=state.iteration, algorithm=algo,
                  scores=_rounded(sel_scores), query="region", excluded=sorted(exclude))
        state.tried.add((sig, algo))
        replacement = _run(portfolio, algo, image, outputs, failed, trace)
        if replacement is None:
            if all(a in failed for a in ids):
                raise IAError("every algorithm in the portfolio failed on this image")
            continue
        trace.add("segmentation", iteration=state.iteration, algorithm=algo)

        if config.merge_mode == "image":
            merged = replacement
            changed = np.ones(merged.shape, dtype=bool)
        else:
            merged = merge_region(state.current, replacement, reg.mask, config.dilation)
            changed = merged.pixels != state.current.pixels
        accept = True
        if config.oracle_guard:
            accept = image_score(merged, gt) >= image_score(state.current, gt)
        trace.add("merge", iteration=state.iteration, algorithm=algo, accepted=accept,
                  pixels_changed=int(changed.sum()), mode=config.merge_mode)
        if accept:
            state.source = np.where(changed, ids.index(algo), state.source).astype(np.int16)
            state.current = merged

    trace.add("final", iterations=state.iteration,
              tried=sorted([list(sig), a] for sig, a in state.tried))
    return state.current, trace


def _bbox(region: Region) -> tuple[int, int, int, int]:
    return tuple(int(v) for v in region.bbox)

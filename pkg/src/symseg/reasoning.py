"""Relational scene graphs, co-occurrence statistics and contradiction handling."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage as ndi

from .dataset import LabelMap, LabelVocabulary, Region, extract_regions
from .features import RegionAttributes, extract_region_attributes

POSITIONS = ("left", "right", "above", "below")
SIZES = ("larger", "smaller", "same")
DEPTHS = ("in_front", "back")
FAMILIES = {"pos": POSITIONS, "size": SIZES, "depth": DEPTHS}
_INVERSE = {"left": "right", "right": "left", "above": "below", "below": "above",
            "larger": "smaller", "smaller": "larger", "same": "same",
            "in_front": "back", "back": "in_front"}

SHAPE_FLOOR = 1e-6
_CROSS = ndi.generate_binary_structure(2, 1)


# -- shape descriptor ----------------------------------------------------------

def _hough_table(n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of the bin angles k*180/n_bins degrees.

    For even ``n_bins`` the upper half is built from the lower half as
    (-sin, cos), so a 90 degree rotation maps bins onto each other exactly.
    """
    theta = np.pi * np.arange(n_bins) / n_bins
    cos, sin = np.cos(theta), np.sin(theta)
    if n_bins % 2 == 0:
        half = n_bins // 2
        cos[half:], sin[half:] = -sin[:half], cos[:half]
    return cos, sin


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndi.binary_erosion(mask, structure=_CROSS, border_value=0)


def shape_descriptor(mask: np.ndarray, n_bins: int = 8) -> np.ndarray:
    """Orientation histogram of the region boundary from a Hough line accumulator.

    Boundary pixels vote for lines rho = x cos(theta) + y sin(theta) with theta
    on ``n_bins`` angles in [0, 180) degrees (theta is the line normal, so
    vertical edges land in the 0 degree bin). Coordinates are taken relative to
    the bounding-box center. Each theta column keeps its maximum vote count and
    the maxima are normalized to sum to 1.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    edge = boundary_pixels(mask)
    rows, cols = np.nonzero(edge)
    all_r, all_c = np.nonzero(mask)
    cx = (all_c.min() + all_c.max()) / 2
    cy = (all_r.min() + all_r.max()) / 2
    dx, dy = cols - cx, rows - cy
    cos, sin = _hough_table(n_bins)
    rho = np.rint(dx[None, :] * cos[:, None] + dy[None, :] * sin[:, None]).astype(np.int64)
    peaks = np.empty(n_bins)
    for b in range(n_bins):
        _, counts = np.unique(rho[b], return_counts=True)
        peaks[b] = counts.max()
    return peaks / peaks.sum()


def shape_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity rescaled to (0, 1]."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0
    return max((1.0 + cos) / 2.0, SHAPE_FLOOR)


# -- relational graph ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GraphNode:
    region_id: int
    category: int
    attributes: RegionAttributes
    shape: np.ndarray
    border_px: int
    mask: np.ndarray

    @property
    def area(self) -> int:
        return self.attributes.area

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return self.attributes.bbox


@dataclass(frozen=True, eq=False)
class RelationalGraph:
    nodes: tuple[GraphNode, ...]
    # (a, b) with a < b as node positions -> (position, size, depth) of a relative to b
    edges: Mapping[tuple[int, int], tuple[str, str, str]]
    shape: tuple[int, int]

    def __len__(self):
        return len(self.nodes)

    def index_of(self, region_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.region_id == region_id:
                return i
        raise KeyError(f"region {region_id} not in graph")

    def node(self, region_id: int) -> GraphNode:
        return self.nodes[self.index_of(region_id)]

    def relation(self, a: int, b: int) -> tuple[str, str, str]:
        """Relations of node ``a`` relative to node ``b`` (node positions)."""
        if a < b:
            return self.edges[(a, b)]
        return tuple(_INVERSE[r] for r in self.edges[(b, a)])

    def with_category(self, region_id: int, category: int) -> "RelationalGraph":
        nodes = list(self.nodes)
        i = self.index_of(region_id)
        nodes[i] = replace(nodes[i], category=category)
        return RelationalGraph(tuple(nodes), self.edges, self.shape)

    def permuted(self, order: Sequence[int]) -> "RelationalGraph":
        """Same scene with nodes listed in ``order`` (a permutation of positions)."""
        nodes = tuple(self.nodes[i] for i in order)
        edges = {}
        for a in range(len(order)):
            for b in range(a + 1, len(order)):
                edges[(a, b)] = self.relation(order[a], order[b])
        return RelationalGraph(nodes, edges, self.shape)


def _border_count(mask: np.ndarray) -> int:
    return int(mask[0].sum() + mask[-1].sum() + mask[1:-1, 0].sum() + mask[1:-1, -1].sum())


def pair_relations(na: GraphNode, nb: GraphNode, eps: float = 0.2) -> tuple[str, str, str]:
    ax, ay = na.attributes.centroid_x, na.attributes.centroid_y
    bx, by = nb.attributes.centroid_x, nb.attributes.centroid_y
    dx, dy = bx - ax, by - ay
    if abs(dx) >= abs(dy):
        pos = "left" if dx >= 0 else "right"
    else:
        pos = "above" if dy > 0 else "below"
    big, small = max(na.area, nb.area), min(na.area, nb.area)
    if big <= (1 + eps) * small:
        size = "same"
    else:
        size = "larger" if na.area > nb.area else "smaller"
    # full ties go to the lower region id so the relation stays antisymmetric
    depth = ("back" if (na.border_px, na.area, -na.region_id) > (nb.border_px, nb.area, -nb.region_id)
             else "in_front")
    return pos, size, depth


def build_graph(label_map: LabelMap, eps: float = 0.2, shape_bins: int = 8,
                min_region_px: int = 25) -> RelationalGraph:
    """Complete multi-relational graph over the labeled regions of a map."""
    regions = extract_regions(label_map, min_region_px)
    if not regions:
        raise ValueError("label map has no object regions")
    return graph_from_regions(regions, label_map.shape, eps, shape_bins)


def graph_from_regions(regions: Sequence[Region], shape: tuple[int, int], eps: float = 0.2,
                       shape_bins: int = 8) -> RelationalGraph:
    nodes = tuple(
        GraphNode(r.id, r.category, extract_region_attributes(r.mask),
                  shape_descriptor(r.mask, shape_bins), _border_count(r.mask), r.mask)
        for r in regions)
    edges = {(a, b): pair_relations(nodes[a], nodes[b], eps)
             for a in range(len(nodes)) for b in range(a + 1, len(nodes))}
    return RelationalGraph(nodes, edges, tuple(shape))


# -- co-occurrence model ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CooccurrenceModel:
    categories: tuple[str, ...]
    p_pos: np.ndarray     # (C, C, 4)
    p_size: np.ndarray    # (C, C, 3)
    p_depth: np.ndarray   # (C, C, 2)
    p_shape: np.ndarray   # (C, bins)
    alpha: float
    eps: float = 0.2
    n_graphs: int = 0

    @property
    def shape_bins(self) -> int:
        return self.p_shape.shape[1]

    def table(self, family: str) -> np.ndarray:
        return {"pos": self.p_pos, "size": self.p_size, "depth": self.p_depth}[family]

    def edge_terms(self, ca: int, cb: int, rel: tuple[str, str, str]) -> tuple[float, float, float]:
        pos, size, depth = rel
        return (float(self.p_pos[ca, cb, POSITIONS.index(pos)]),
                float(self.p_size[ca, cb, SIZES.index(size)]),
                float(self.p_depth[ca, cb, DEPTHS.index(depth)]))

    def to_dict(self) -> dict:
        return {"format": "symseg.cooccurrence", "version": 1,
                "categories": list(self.categories), "alpha": self.alpha, "eps": self.eps,
                "shape_bins": self.shape_bins, "n_graphs": self.n_graphs,
                "p_pos": self.p_pos.tolist(), "p_size": self.p_size.tolist(),
                "p_depth": self.p_depth.tolist(), "p_shape": self.p_shape.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CooccurrenceModel":
        if d.get("format") != "symseg.cooccurrence":
            raise ValueError("not a co-occurrence model file")
        return cls(tuple(d["categories"]), np.array(d["p_pos"]), np.array(d["p_size"]),
                   np.array(d["p_depth"]), np.array(d["p_shape"]), float(d["alpha"]),
                   float(d.get("eps", 0.2)), int(d.get("n_graphs", 0)))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CooccurrenceModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _normalize(counts: np.ndarray, alpha: float) -> np.ndarray:
    k = counts.shape[-1]
    total = counts.sum(axis=-1, keepdims=True)
    sm = counts + alpha
    denom = total + k * alpha
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, sm / np.where(denom > 0, denom, 1), 1.0 / k)
    return out


def learn_cooccurrence(gt_maps: Iterable[LabelMap], alpha: float = 1.0, eps: float = 0.2,
                       shape_bins: int = 8, min_region_px: int = 25) -> CooccurrenceModel:
    """Count pairwise relations over ground-truth graphs.

    Each unordered region pair is counted in both orientations, so
    ``p_pos[a, b, left] == p_pos[b, a, right]``. Distributions are smoothed
    with pseudo-count ``alpha``; a pair never observed with ``alpha == 0``
    falls back to uniform.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    vocab: LabelVocabulary | None = None
    c_pos = c_size = c_depth = None
    shape_sum = shape_n = None
    n_graphs = 0
    for m in gt_maps:
        if vocab is None:
            vocab = m.vocab
            C = len(vocab)
            c_pos, c_size, c_depth = np.zeros((C, C, 4)), np.zeros((C, C, 3)), np.zeros((C, C, 2))
            shape_sum, shape_n = np.zeros((C, shape_bins)), np.zeros(C)
        regions = extract_regions(m, min_region_px)
        if not regions:
            continue
        g = graph_from_regions(regions, m.shape, eps, shape_bins)
        for node in g.nodes:
            shape_sum[node.category] += node.shape
            shape_n[node.category] += 1
        if len(g) < 2:
            continue
        n_graphs += 1
        for a in range(len(g)):
            for b in range(len(g)):
                if a == b:
                    continue
                ca, cb = g.nodes[a].category, g.nodes[b].category
                pos, size, depth = g.relation(a, b)
                c_pos[ca, cb, POSITIONS.index(pos)] += 1
                c_size[ca, cb, SIZES.index(size)] += 1
                c_depth[ca, cb, DEPTHS.index(depth)] += 1
    if vocab is None:
        raise ValueError("no ground-truth maps given")
    with np.errstate(invalid="ignore"):
        p_shape = np.where(shape_n[:, None] > 0, shape_sum / np.maximum(shape_n, 1)[:, None],
                           1.0 / shape_bins)
    return CooccurrenceModel(vocab.names, _normalize(c_pos, alpha), _normalize(c_size, alpha),
                             _normalize(c_depth, alpha), p_shape, float(alpha), eps, n_graphs)


# -- scoring -------------------------------------------------------------------

def region_terms(graph: RelationalGraph, model: CooccurrenceModel, idx: int,
                 category: int | None = None, use_shape: bool = True) -> list[float]:
    """All probability/similarity terms touching node ``idx``.

    ``category`` overrides the node's own label (others stay fixed).
    """
    node = graph.nodes[idx]
    cat = node.category if category is None else category
    terms = []
    for j, other in enumerate(graph.nodes):
        if j == idx:
            continue
        terms.extend(model.edge_terms(cat, other.category, graph.relation(idx, j)))
    if use_shape:
        terms.append(shape_similarity(node.shape, model.p_shape[cat]))
    return terms


def _combine(terms: Sequence[float], mode: str) -> float:
    logs = np.log(np.asarray(terms, dtype=float))
    if mode == "geometric":
        return float(np.exp(logs.mean()))
    if mode == "product":
        return float(np.exp(logs.sum()))
    raise ValueError(f"unknown combination mode {mode!r}")


def consistency_scores(graph: RelationalGraph, model: CooccurrenceModel, use_shape: bool = True,
                       mode: str = "geometric") -> tuple[dict[int, float], float]:
    """Per-region and global plausibility of a graph under the model.

    Each unordered edge contributes its position, size and depth
    probabilities; each node (optionally) a shape term. Region score combines
    the terms touching the region, the global score combines all terms once.
    """
    if len(graph) < 2:
        raise ValueError("consistency needs at least two regions")
    per_region = {n.region_id: _combine(region_terms(graph, model, i, use_shape=use_shape), mode)
                  for i, n in enumerate(graph.nodes)}
    all_terms = []
    for a, b in graph.edges:
        # orient by region id so the score does not depend on node order
        if graph.nodes[a].region_id > graph.nodes[b].region_id:
            a, b = b, a
        all_terms.extend(model.edge_terms(graph.nodes[a].category, graph.nodes[b].category,
                                          graph.relation(a, b)))
    if use_shape:
        all_terms.extend(shape_similarity(n.shape, model.p_shape[n.category]) for n in graph.nodes)
    return per_region, _combine(all_terms, mode)


def detect_contradiction(scores: Mapping[int, float], tau: float = 0.15,
                         tried: Iterable[int] = ()) -> int | None:
    """Lowest-scoring region below ``tau`` that has not been tried yet."""
    tried = set(tried)
    candidates = sorted((s, rid) for rid, s in scores.items() if s < tau and rid not in tried)
    return candidates[0][1] if candidates else None


@dataclass(frozen=True)
class Hypothesis:
    region_id: int
    category: int
    score: float


def generate_hypothesis(graph: RelationalGraph, model: CooccurrenceModel, region_id: int,
                        background_id: int = 0, use_shape: bool = True,
                        mode: str = "geometric") -> Hypothesis:
    """Most plausible replacement label for one region, all other labels fixed."""
    if len(graph) < 2:
        raise ValueError("hypotheses need at least two regions")
    idx = graph.index_of(region_id)
    current = graph.nodes[idx].category
    best_cat, best = None, -math.inf
    for c in range(len(model.categories)):
        if c in (current, background_id):
            continue
        s = _combine(region_terms(graph, model, idx, category=c, use_shape=use_shape), mode)
        if s > best:
            best_cat, best = c, s
    if best_cat is None:
        raise ValueError("vocabulary offers no alternative category")
    return Hypothesis(region_id, best_cat, best)

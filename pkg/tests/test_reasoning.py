
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import blocks_map
from oracles import hough_descriptor_loops, hypothesis_by_enumeration
from symseg.dataset import LabelMap, LabelVocabulary
from symseg.reasoning import (DEPTHS, POSITIONS, SIZES, CooccurrenceModel, RelationalGraph,
                              build_graph, consistency_scores, detect_contradiction,
                              generate_hypothesis, learn_cooccurrence, shape_descriptor,
                              shape_similarity)

_INV = {"left": "right", "right": "left", "above": "below", "below": "above",
        "larger": "smaller", "smaller": "larger", "same": "same"}


def _uniform_model(n_cat, bins=8):
    return CooccurrenceModel(tuple(f"c{i}" for i in range(n_cat)),
                             np.full((n_cat, n_cat, 4), 0.25), np.full((n_cat, n_cat, 3), 1 / 3),
                             np.full((n_cat, n_cat, 2), 0.5), np.full((n_cat, bins), 1 / bins), 1.0)


def test_relations_basic(voc):
    # centroids (x=10, y=20) and (x=50, y=20)
    m = blocks_map(voc, (40, 64), [(1, 15, 5, 11, 11), (2, 15, 45, 11, 11)])
    g = build_graph(m)
    pos, size, depth = g.relation(0, 1)
    assert (g.nodes[0].attributes.centroid_x, g.nodes[1].attributes.centroid_x) == (10, 50)
    assert pos == "left" and size == "same" and g.relation(1, 0)[0] == "right"


def test_size_band_and_border_depth(voc):
    m = blocks_map(voc, (40, 40), [(1, 30, 0, 10, 40), (2, 5, 10, 10, 10)])
    g = build_graph(m)
    assert g.relation(0, 1) == ("above", "larger", "back")[:0] + g.relation(0, 1)
    pos, size, depth = g.relation(0, 1)
    assert pos == "below" and size == "larger" and depth == "back"
    assert g.relation(1, 0)[2] == "in_front"
    # 100 vs 119 px is within the 20% band, 100 vs 121 is not
    same = blocks_map(voc, (40, 40), [(1, 0, 0, 10, 10), (2, 20, 20, 7, 17)])
    assert build_graph(same).relation(0, 1)[1] == "same"
    diff = blocks_map(voc, (40, 40), [(1, 0, 0, 10, 10), (2, 20, 20, 11, 11)])
    assert build_graph(diff).relation(0, 1)[1] == "smaller"


def test_depth_tie_broken_by_area(voc):
    m = blocks_map(voc, (40, 40), [(1, 5, 5, 10, 10), (2, 20, 20, 12, 12)])
    assert build_graph(m).relation(1, 0)[2] == "back"


def test_all_background_graph_errors(voc):
    with pytest.raises(ValueError):
        build_graph(LabelMap(np.zeros((5, 5), np.uint8), voc))


maps4 = st.integers(0, 2 ** 31).map(lambda s: np.random.default_rng(s))


def _random_blocks(rng, vocab, n=None, size=32):
    n = n or int(rng.integers(2, 5))
    blocks = []
    for _ in range(n):
        h, w = rng.integers(5, 12, 2)
        blocks.append((int(rng.integers(1, len(vocab))), int(rng.integers(0, size - h)),
                       int(rng.integers(0, size - w)), int(h), int(w)))
    return blocks_map(vocab, (size, size), blocks)


@settings(max_examples=60, deadline=None)
@given(maps4)
def test_graph_complete_and_antisymmetric(rng):
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(6)))
    g = build_graph(_random_blocks(rng, vocab), min_region_px=1)
    n = len(g)
    assert set(g.edges) == {(a, b) for a in range(n) for b in range(a + 1, n)}
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            pa, sa, da = g.relation(a, b)
            pb, sb, db = g.relation(b, a)
            assert pa in POSITIONS and sa in SIZES and da in DEPTHS
            assert pb == _INV[pa] and sb == _INV[sa] and da != db


def test_rectangle_descriptor():
    mask = np.zeros((30, 30), bool)
    mask[5:20, 3:27] = True
    d = shape_descriptor(mask)
    assert d.sum() == pytest.approx(1.0)
    assert set(np.argsort(d)[-2:]) == {0, 4}


def test_disk_descriptor_near_uniform():
    yy, xx = np.mgrid[0:41, 0:41]
    disk = (yy - 20) ** 2 + (xx - 20) ** 2 <= 15 ** 2
    d = shape_descriptor(disk)
    np.testing.assert_allclose(d, hough_descriptor_loops(disk, 8), atol=1e-12)
    mask = np.zeros((41, 41), bool)
    mask[10:30, 5:36] = True
    rect = shape_descriptor(mask)
    # digital disks keep small axis-aligned peaks, far below a rectangle's
    assert np.abs(d - 1 / 8).max() < 0.05
    assert np.abs(d - 1 / 8).max() < np.abs(rect - 1 / 8).max() / 3


@settings(max_examples=40, deadline=None)
@given(maps4, st.sampled_from([4, 6, 8, 12]))
def test_descriptor_matches_brute_force_hough(rng, bins):
    mask = rng.random((9, 11)) < 0.6
    if not mask.any():
        return
    np.testing.assert_allclose(shape_descriptor(mask, bins), hough_descriptor_loops(mask, bins),
                               atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(maps4, st.sampled_from([4, 8, 12]))
def test_rotation_permutes_bins(rng, bins):
    mask = rng.random((10, 7)) < 0.6
    if not mask.any():
        return
    d, r = shape_descriptor(mask, bins), shape_descriptor(np.rot90(mask), bins)
    assert np.array_equal(np.roll(d, bins // 2), r) or np.array_equal(np.roll(d, -bins // 2), r)


def test_shape_similarity_range():
    a = np.array([1.0, 0, 0, 0])
    assert shape_similarity(a, a) == pytest.approx(1.0)
    assert shape_similarity(a, -a) == 1e-6
    assert shape_similarity(a, np.array([0, 1.0, 0, 0])) == pytest.approx(0.5)


def _person_horse_corpus(voc, left_count=3, total=4):
    person, horse = voc.index("person"), voc.index("horse")
    maps = []
    for i in range(total):
        px, hx = (5, 40) if i < left_count else (40, 5)
        maps.append(blocks_map(voc, (40, 64), [(person, 10, px, 15, 10), (horse, 12, hx, 12, 20)]))
    return maps


def test_cooccurrence_hand_counts(voc):
    person, horse = voc.index("person"), voc.index("horse")
    model = learn_cooccurrence(_person_horse_corpus(voc), alpha=0.0)
    assert model.p_pos[person, horse, POSITIONS.index("left")] == 0.75
    assert model.p_pos[horse, person, POSITIONS.index("right")] == 0.75
    assert model.n_graphs == 4
    # unseen pair with alpha = 0 falls back to uniform
    assert np.allclose(model.p_pos[1, 2], 0.25)


def test_cooccurrence_smoothing(voc):
    alpha = 0.7
    model = learn_cooccurrence(_person_horse_corpus(voc, 1, 1), alpha=alpha)
    person, horse = voc.index("person"), voc.index("horse")
    left = POSITIONS.index("left")
    assert model.p_pos[person, horse, left] == pytest.approx((1 + alpha) / (1 + 4 * alpha))
    assert np.allclose(model.p_pos[3, 4], 0.25) and np.allclose(model.p_size[3, 4], 1 / 3)
    for fam in ("pos", "size", "depth"):
        t = model.table(fam)
        assert np.all(t > 0)
        np.testing.assert_allclose(t.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(model.p_shape.sum(axis=-1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        learn_cooccurrence([], 1.0)
    with pytest.raises(ValueError):
        learn_cooccurrence(_person_horse_corpus(voc), alpha=-1)


def test_cooccurrence_roundtrip(tmp_path, voc):
    model = learn_cooccurrence(_person_horse_corpus(voc), alpha=0.3)
    model.save(tmp_path / "c.json")
    again = CooccurrenceModel.load(tmp_path / "c.json")
    assert np.array_equal(again.p_pos, model.p_pos) and again.alpha == 0.3
    assert again.categories == voc.names and again.shape_bins == 8


def test_uniform_model_scores_equal():
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(6)))
    g = build_graph(_random_blocks(np.random.default_rng(0), vocab, 4), min_region_px=1)
    scores, glob = consistency_scores(g, _uniform_model(6), use_shape=False)
    vals = list(scores.values())
    assert max(vals) - min(vals) < 1e-12
    assert all(0 < v <= 1 for v in vals) and 0 < glob <= 1


def test_consistency_needs_two_regions(voc):
    g = build_graph(blocks_map(voc, (20, 20), [(1, 2, 2, 8, 8)]))
    with pytest.raises(ValueError):
        consistency_scores(g, _uniform_model(21))


def _three_region_scene(voc):
    return blocks_map(voc, (64, 64), [(voc.index("aeroplane"), 4, 20, 10, 24),
                                      (voc.index("cow"), 40, 4, 14, 18),
                                      (voc.index("horse"), 38, 40, 16, 18)])


def test_mode_graph_beats_single_edge_perturbations(voc):
    scene = _three_region_scene(voc)
    model = learn_cooccurrence([scene] * 3, alpha=1.0)
    g = build_graph(scene)
    _, base = consistency_scores(g, model)
    families = (POSITIONS, SIZES, DEPTHS)
    n_checked = 0
    for key, rel in g.edges.items():
        for f, values in enumerate(families):
            for v in values:
                if v == rel[f]:
                    continue
                edges = dict(g.edges)
                edges[key] = tuple(v if i == f else r for i, r in enumerate(rel))
                _, perturbed = consistency_scores(RelationalGraph(g.nodes, edges, g.shape), model)
                assert base >= perturbed
                n_checked += 1
    assert n_checked == 3 * (3 + 2 + 1)


def test_smaller_term_never_raises_global(voc):
    scene = _three_region_scene(voc)
    model = learn_cooccurrence([scene] * 2, alpha=1.0)
    g = build_graph(scene)
    _, base = consistency_scores(g, model)
    (a, b), (pos, _, _) = next(iter(g.edges.items()))
    ca, cb = g.nodes[a].category, g.nodes[b].category
    p_pos = model.p_pos.copy()
    p_pos[ca, cb, POSITIONS.index(pos)] *= 0.5
    weaker = CooccurrenceModel(model.categories, p_pos, model.p_size, model.p_depth,
                               model.p_shape, model.alpha)
    assert consistency_scores(g, weaker)[1] < base


@settings(max_examples=30, deadline=None)
@given(maps4)
def test_scores_invariant_under_node_permutation(rng):
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(6)))
    g = build_graph(_random_blocks(rng, vocab, 4), min_region_px=1)
    if len(g) < 2:
        return
    model = _random_model(rng, 6)
    s1, g1 = consistency_scores(g, model)
    s2, g2 = consistency_scores(g.permuted(list(rng.permutation(len(g)))), model)
    assert s1.keys() == s2.keys()
    for k in s1:
        assert s1[k] == pytest.approx(s2[k], rel=1e-12)
    assert g1 == pytest.approx(g2, rel=1e-12)


def test_detect_contradiction_rules():
    scores = {0: 0.5, 1: 0.05, 2: 0.1}
    assert detect_contradiction(scores, 0.01) is None
    assert detect_contradiction(scores, 0.15) == 1
    assert detect_contradiction(scores, 0.15, tried={1}) == 2
    assert detect_contradiction(scores, 0.15, tried={1, 2}) is None


def test_detects_floating_cow(voc):
    aeroplane, cow, horse = (voc.index(n) for n in ("aeroplane", "cow", "horse"))
    rng = np.random.default_rng(1)
    corpus = []
    for _ in range(30):
        jx = int(rng.integers(-3, 4))
        corpus.append(blocks_map(voc, (64, 64), [(aeroplane, 3, 20 + jx, 6, 10),
                                                 (cow, 40, 4 + jx, 14, 18),
                                                 (horse, 38, 40 + jx, 16, 18)]))
    model = learn_cooccurrence(corpus, alpha=0.1)
    # a distant cow: small, floating left of the aeroplane and above the horse
    scene = blocks_map(voc, (64, 64), [(aeroplane, 3, 40, 6, 10), (cow, 2, 4, 8, 8),
                                       (horse, 38, 22, 16, 18)])
    g = build_graph(scene)
    scores, _ = consistency_scores(g, model)
    cow_id = next(n.region_id for n in g.nodes if n.category == cow)
    assert detect_contradiction(scores, 0.15) == cow_id
    assert min(scores, key=scores.get) == cow_id


def test_hypothesis_dominant_relation(voc):
    person, horse, cow = voc.index("person"), voc.index("horse"), voc.index("cow")
    n = len(voc)
    p_pos = np.full((n, n, 4), 0.25)
    p_pos[person, horse] = (0.9, 0.1 / 3, 0.1 / 3, 0.1 / 3)
    model = CooccurrenceModel(voc.names, p_pos, np.full((n, n, 3), 1 / 3), np.full((n, n, 2), 0.5),
                              np.full((n, 8), 1 / 8), 1.0)
    scene = blocks_map(voc, (40, 64), [(cow, 10, 5, 15, 10), (horse, 12, 40, 12, 20)])
    g = build_graph(scene)
    h = generate_hypothesis(g, model, g.nodes[0].region_id)
    assert h.category == person and h.category != cow and 0 < h.score <= 1


def test_hypothesis_uniform_tie_break(voc):
    scene = blocks_map(voc, (40, 64), [(1, 10, 5, 15, 10), (5, 12, 40, 12, 20)])
    g = build_graph(scene)
    model = _uniform_model(21)
    assert generate_hypothesis(g, model, g.nodes[0].region_id).category == 2
    assert generate_hypothesis(g, model, g.nodes[1].region_id).category == 1


def _random_model(rng, n_cat, bins=8):
    return CooccurrenceModel(tuple(f"c{i}" for i in range(n_cat)),
                             rng.dirichlet(np.ones(4), (n_cat, n_cat)),
                             rng.dirichlet(np.ones(3), (n_cat, n_cat)),
                             rng.dirichlet(np.ones(2), (n_cat, n_cat)),
                             rng.dirichlet(np.ones(bins), n_cat), 1.0)


@settings(max_examples=40, deadline=None)
@given(maps4, st.booleans())
def test_hypothesis_matches_enumeration(rng, use_shape):
    n_cat = int(rng.integers(3, 7))
    vocab = LabelVocabulary(tuple(f"c{i}" for i in range(n_cat)))
    g = build_graph(_random_blocks(rng, vocab), min_region_px=1)
    if len(g) < 2:
        return
    model = _random_model(rng, n_cat)
    target = int(rng.integers(len(g)))
    h = generate_hypothesis(g, model, g.nodes[target].region_id, use_shape=use_shape)
    c, s = hypothesis_by_enumeration([n.mask for n in g.nodes], [n.category for n in g.nodes],
                                     target, model.p_pos, model.p_size, model.p_depth,
                                     model.p_shape, 0.2, 8, use_shape=use_shape)
    assert h.category == c
    assert h.score == pytest.approx(s, rel=1e-9)

"""Synthetic scenes with a learnable layout and a complementary noisy-oracle portfolio.

Every category is drawn in its VOC palette color, perturbed by at most 28
levels per channel, so ``segmenters.palette_decode`` recovers the ground truth
exactly. Categories have a preferred height in the frame, a size and a shape,
which gives the co-occurrence model real structure to learn.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import (LabelMap, LabelVocabulary, extract_regions, voc_palette, write_image,
                      write_label_map, write_manifest)
from .segmenters import SyntheticBackendSpec, SyntheticSpec, make_synthetic_portfolio


@dataclass(frozen=True)
class CategoryLayout:
    theme: int
    zone: float      # preferred center height, fraction of frame (0 = top)
    size: float      # object height, fraction of frame
    aspect: float    # width / height
    shape: str       # "rect" or "ellipse"
    texture: float   # brightness texture frequency, cycles/pixel


THEMES = ("vehicles", "animals", "indoor")

LAYOUT = {
    "aeroplane":   CategoryLayout(0, 0.18, 0.16, 2.2, "ellipse", 0.05),
    "bicycle":     CategoryLayout(0, 0.66, 0.26, 1.4, "rect", 0.30),
    "boat":        CategoryLayout(0, 0.62, 0.22, 1.8, "rect", 0.10),
    "bus":         CategoryLayout(0, 0.70, 0.34, 1.6, "rect", 0.15),
    "car":         CategoryLayout(0, 0.76, 0.24, 1.8, "rect", 0.20),
    "motorbike":   CategoryLayout(0, 0.70, 0.26, 1.3, "ellipse", 0.25),
    "train":       CategoryLayout(0, 0.68, 0.30, 2.4, "rect", 0.12),
    "bird":        CategoryLayout(1, 0.20, 0.14, 1.4, "ellipse", 0.08),
    "cat":         CategoryLayout(1, 0.66, 0.22, 1.2, "ellipse", 0.28),
    "cow":         CategoryLayout(1, 0.72, 0.32, 1.5, "ellipse", 0.06),
    "dog":         CategoryLayout(1, 0.70, 0.24, 1.3, "ellipse", 0.22),
    "horse":       CategoryLayout(1, 0.68, 0.36, 1.3, "ellipse", 0.09),
    "sheep":       CategoryLayout(1, 0.74, 0.24, 1.4, "ellipse", 0.35),
    "person":      CategoryLayout(1, 0.55, 0.44, 0.45, "rect", 0.18),
    "bottle":      CategoryLayout(2, 0.48, 0.22, 0.45, "rect", 0.40),
    "chair":       CategoryLayout(2, 0.68, 0.30, 0.8, "rect", 0.14),
    "diningtable": CategoryLayout(2, 0.72, 0.26, 2.0, "rect", 0.07),
    "pottedplant": CategoryLayout(2, 0.60, 0.26, 0.8, "ellipse", 0.32),
    "sofa":        CategoryLayout(2, 0.74, 0.28, 2.2, "rect", 0.11),
    "tvmonitor":   CategoryLayout(2, 0.26, 0.22, 1.3, "rect", 0.45),
}

# Mislabeling used by weak backends: each category is confused with one from
# another theme that sits at a very different height, so the error shows up
# as an implausible relation.
CONFUSER = {
    "aeroplane": "cow", "bicycle": "bird", "boat": "tvmonitor", "bus": "bird",
    "car": "tvmonitor", "motorbike": "bird", "train": "tvmonitor",
    "bird": "sofa", "cat": "aeroplane", "cow": "aeroplane", "dog": "tvmonitor",
    "horse": "aeroplane", "sheep": "aeroplane", "person": "aeroplane",
    "bottle": "car", "chair": "bird", "diningtable": "aeroplane",
    "pottedplant": "bird", "sofa": "aeroplane", "tvmonitor": "car",
}

_NOISE = 18
_TEXTURE_AMP = 10


def theme_members(vocab: LabelVocabulary, theme: int) -> list[str]:
    return [n for n in vocab.names if n in LAYOUT and LAYOUT[n].theme == theme]


def _draw_shape(shape: str, cx: float, cy: float, w: float, h: float, grid) -> np.ndarray:
    yy, xx = grid
    if shape == "ellipse":
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)


def render(gt: np.ndarray, vocab: LabelVocabulary, rng: np.random.Generator) -> np.ndarray:
    """RGB image for a label grid; decodable back to ``gt`` by nearest palette color."""
    pal = voc_palette(len(vocab)).astype(np.int16)
    h, w = gt.shape
    img = pal[gt].copy()
    yy, xx = np.mgrid[0:h, 0:w]
    tex = np.zeros((h, w))
    for cat in np.unique(gt):
        name = vocab.names[cat]
        lay = LAYOUT.get(name)
        if lay is None:
            continue
        phi = 0.7 * cat
        wave = np.sin(2 * np.pi * lay.texture * (xx * np.cos(phi) + yy * np.sin(phi)))
        tex[gt == cat] = _TEXTURE_AMP * wave[gt == cat]
    noise = rng.integers(-_NOISE, _NOISE + 1, size=(h, w, 3))
    img = img + np.rint(tex)[..., None].astype(np.int16) + noise
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_scene(rng: np.random.Generator, vocab: LabelVocabulary, size: int = 64,
                   n_objects: tuple[int, int] = (2, 3), theme_purity: float = 0.85,
                   theme: int | None = None, min_region_px: int = 25,
                   max_tries: int = 50) -> tuple[np.ndarray, LabelMap, int]:
    """One scene: (RGB image, ground truth, theme index)."""
    names = [n for n in vocab.names if n in LAYOUT]
    grid = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(max_tries):
        th = int(rng.integers(len(THEMES))) if theme is None else theme
        members = [n for n in names if LAYOUT[n].theme == th] or names
        k = int(rng.integers(n_objects[0], n_objects[1] + 1))
        cats = [str(rng.choice(members)) if rng.random() < theme_purity else str(rng.choice(names))
                for _ in range(k)]
        objs = []
        for name in cats:
            lay = LAYOUT[name]
            oh = lay.size * size * rng.uniform(0.85, 1.15)
            ow = min(oh * lay.aspect, 0.6 * size)
            cy = np.clip(lay.zone * size + rng.normal(0, 0.05 * size), oh / 2, size - oh / 2)
            cx = rng.uniform(0.12 * size, 0.88 * size)
            objs.append((name, cx, cy, ow, oh))
        # big things first so small ones stay visible in front
        objs.sort(key=lambda o: -o[3] * o[4])
        gt = np.full((size, size), vocab.background_id, dtype=np.uint8)
        for name, cx, cy, ow, oh in objs:
            gt[_draw_shape(LAYOUT[name].shape, cx, cy, ow, oh, grid)] = vocab.index(name)
        label_map = LabelMap(gt, vocab)
        regions = extract_regions(label_map, min_region_px)
        tiny = extract_regions(label_map, 1)
        if len(regions) >= 2 and len(regions) == len(tiny):
            return render(gt, vocab, rng), label_map, th
    raise RuntimeError("could not place a multi-object scene; enlarge the frame")


def default_synthetic_spec(vocab: LabelVocabulary | None = None, miss_rate: float = 0.25,
                           confusion_rate: float = 0.6, morph: int = -1,
                           seed: int = 0) -> SyntheticSpec:
    """Three backends, each flawless on one theme and unreliable elsewhere."""
    vocab = vocab or LabelVocabulary.voc()
    backends = []
    for t, theme in enumerate(THEMES):
        strong = tuple(theme_members(vocab, t))
        weak = [n for n in vocab.names if n in LAYOUT and n not in strong]
        backends.append(SyntheticBackendSpec(
            id=f"synth_{theme}", strong=strong, miss_rate=miss_rate,
            confusion={n: CONFUSER[n] for n in weak if CONFUSER[n] in vocab.names},
            confusion_rate=confusion_rate, morph=morph, seed=seed + 101 * (t + 1)))
    return SyntheticSpec(tuple(backends), vocab)


def generate_dataset(out_dir: str | os.PathLike, n_images: int = 200, seed: int = 0,
                     size: int = 64, val_fraction: float = 0.3,
                     vocab: LabelVocabulary | None = None) -> tuple[Path, Path]:
    """Write images, ground truth, ``manifest.tsv`` and ``portfolio.json``.

    Returns (manifest path, portfolio path).
    """
    vocab = vocab or LabelVocabulary.voc()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_val = int(round(n_images * val_fraction))
    rows = []
    themes = []
    for i in range(n_images):
        image, gt, th = generate_scene(rng, vocab, size)
        stem = f"scene_{i:05d}"
        write_image(out / "images" / f"{stem}.png", image)
        write_label_map(out / "gt" / f"{stem}.png", gt)
        split = "val" if i >= n_images - n_val else "train"
        rows.append((f"images/{stem}.png", f"gt/{stem}.png", split))
        themes.append(THEMES[th])
    manifest = out / "manifest.tsv"
    write_manifest(manifest, vocab, rows)
    portfolio = out / "portfolio.json"
    make_synthetic_portfolio(default_synthetic_spec(vocab, seed=seed)).save(portfolio)
    (out / "themes.json").write_text(json.dumps(themes) + "\n")
    return manifest, portfolio

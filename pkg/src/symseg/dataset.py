"""Images, ground-truth label maps and the manifest that ties them together."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

VOC_CATEGORIES = (
    "background", "aeroplane", "bicycle", "bird", "boat", "bottle", "bus",
    "car", "cat", "chair", "cow", "diningtable", "dog", "horse", "motorbike",
    "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

SPLITS = ("train", "val")

# 4-connectivity
_CROSS = ndi.generate_binary_structure(2, 1)


class DatasetError(Exception):
    """Raised for malformed manifests and unreadable label maps."""


def voc_palette(n: int = 256) -> np.ndarray:
    """Standard PASCAL VOC color map, shape (n, 3), uint8."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


@dataclass(frozen=True)
class LabelVocabulary:
    names: tuple[str, ...]
    background_id: int = 0

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("vocabulary needs at least 2 categories")
        if len(set(names)) != len(names):
            raise ValueError("duplicate category names in vocabulary")
        if not 0 <= self.background_id < len(names):
            raise ValueError(f"background_id {self.background_id} out of range")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown category {name!r}") from None

    @property
    def object_ids(self) -> list[int]:
        return [i for i in range(len(self.names)) if i != self.background_id]

    @classmethod
    def voc(cls) -> "LabelVocabulary":
        return cls(VOC_CATEGORIES, 0)

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text("\n".join(self.names) + "\n")


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel category indices, shape (height, width)."""

    pixels: np.ndarray
    vocab: LabelVocabulary

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"label map must be a non-empty 2-D grid, got shape {px.shape}")
        if not np.issubdtype(px.dtype, np.integer):
            raise ValueError(f"label map must hold integers, got {px.dtype}")
        if px.min() < 0 or px.max() >= len(self.vocab):
            raise ValueError(
                f"label value {int(px.max())} outside vocabulary of size {len(self.vocab)}")
        px = px.astype(np.uint8, copy=True)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.pixels, other.pixels)

    def categories(self) -> list[int]:
        return [int(c) for c in np.unique(self.pixels)]


@dataclass(frozen=True, eq=False)
class Region:
    """One 4-connected component of a single non-background category."""

    id: int
    category: int
    mask: np.ndarray
    bbox: tuple[int, int, int, int]  # x, y, w, h

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def crop(self, array: np.ndarray) -> np.ndarray:
        x, y, w, h = self.bbox
        return array[y:y + h, x:x + w]


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    gt_path: Path
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    vocab: LabelVocabulary

    def split(self, tag: str) -> "DatasetManifest":
        return DatasetManifest(tuple(e for e in self.entries if e.split == tag), self.vocab)

    def __len__(self) -> int:
        return len(self.entries)


def _bbox_of(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


def extract_regions(label_map: LabelMap, min_region_px: int = 25) -> list[Region]:
    """Split a label map into 4-connected single-category regions.

    Components smaller than ``min_region_px`` are dropped. IDs are assigned in
    order of (category index, first pixel of the mask in row-major order).
    """
    px = label_map.pixels
    found = []
    for cat in np.unique(px):
        cat = int(cat)
        if cat == label_map.vocab.background_id:
            continue
        labels, n = ndi.label(px == cat, structure=_CROSS)
        if n == 0:
            continue
        flat = labels.ravel()
        # first row-major pixel of each component
        first = np.full(n + 1, flat.size, dtype=np.int64)
        nz = np.flatnonzero(flat)
        np.minimum.at(first, flat[nz], nz)
        sizes = np.bincount(flat, minlength=n + 1)
        for lab in range(1, n + 1):
            if sizes[lab] < max(min_region_px, 1):
                continue
            found.append((cat, int(first[lab]), labels == lab))
    found.sort(key=lambda t: (t[0], t[1]))
    return [Region(i, cat, mask, _bbox_of(mask)) for i, (cat, _, mask) in enumerate(found)]


def read_label_map(path: str | os.PathLike, vocab: LabelVocabulary) -> LabelMap:
    """Read an 8-bit grayscale or palette image whose pixel values are category indices."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DatasetError(f"{path}: label map must be 8-bit L or P mode, got {im.mode}")
            arr = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read label map {path}: {exc}") from exc
    if arr.size and arr.max() >= len(vocab):
        raise DatasetError(
            f"{path}: unknown category index {int(arr.max())} (vocabulary has {len(vocab)})")
    return LabelMap(arr, vocab)


def write_label_map(path: str | os.PathLike, label_map: LabelMap) -> None:
    # putpalette turns the L raster into a P image
    im = Image.fromarray(label_map.pixels)
    im.putpalette(voc_palette().ravel().tolist())
    im.save(path, optimize=False)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """RGB raster as uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.array(im.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, optimize=False)


def load_manifest(path: str | os.PathLike, check_maps: bool = True) -> DatasetManifest:
    """Parse a manifest file.

    Layout::

        #categories
        background
        cow
        ...
        image_path<TAB>gt_path<TAB>split

    The category block ends at the first tab-separated line (an optional
    ``#entries`` sentinel is also accepted). Relative paths resolve against the
    manifest's directory. With ``check_maps`` every ground-truth map is opened
    and its values checked against the vocabulary.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    lines = path.read_text().splitlines()

    names: list[str] = []
    rows: list[tuple[int, str]] = []
    state = "start"
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        if line.strip() == "#categories":
            if state != "start":
                raise DatasetError(f"{path}:{lineno}: duplicate #categories sentinel")
            state = "categories"
            continue
        if line.strip() == "#entries":
            state = "entries"
            continue
        if line.startswith("#"):
            continue
        if state == "categories" and "\t" not in line:
            names.append(line.strip())
            continue
        if state == "start":
            raise DatasetError(f"{path}:{lineno}: entries before #categories header")
        state = "entries"
        rows.append((lineno, line))

    if not names:
        raise DatasetError(f"{path}: no categories declared")
    try:
        vocab = LabelVocabulary(tuple(names))
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    if not rows:
        raise DatasetError(f"{path}: empty dataset")

    entries = []
    for idx, (lineno, line) in enumerate(rows):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DatasetError(f"entry {idx} (line {lineno}): expected 3 tab-separated fields")
        img, gt, split = (p.strip() for p in parts)
        if split not in SPLITS:
            raise DatasetError(f"entry {idx} (line {lineno}): unknown split tag {split!r}")
        img_p, gt_p = root / img, root / gt
        for kind, p in (("image", img_p), ("label map", gt_p)):
            if not p.is_file():
                raise DatasetError(f"entry {idx} (line {lineno}): {kind} not found: {p}")
        if check_maps:
            try:
                read_label_map(gt_p, vocab)
            except DatasetError as exc:
                raise DatasetError(f"entry {idx} (line {lineno}): {exc}") from exc
        entries.append(ManifestEntry(img_p, gt_p, split))
    return DatasetManifest(tuple(entries), vocab)


def write_manifest(path: str | os.PathLike, vocab: LabelVocabulary,
                   entries: Iterable[tuple[str, str, str]]) -> None:
    out = ["#categories", *vocab.names, "#entries"]
    out += ["\t".join(e) for e in entries]
    Path(path).write_text("\n".join(out) + "\n")


def count_objects(label_map: LabelMap, min_region_px: int = 25) -> int:
    return len(extract_regions(label_map, min_region_px))


def filter_multi_object(manifest: DatasetManifest, min_region_px: int = 25) -> DatasetManifest:
    """Keep entries whose ground truth has at least two object regions."""
    kept = []
    for entry in manifest.entries:
        gt = read_label_map(entry.gt_path, manifest.vocab)
        if count_objects(gt, min_region_px) >= 2:
            kept.append(entry)
    return DatasetManifest(tuple(kept), manifest.vocab)


def load_pairs(manifest: DatasetManifest) -> list[tuple[np.ndarray, LabelMap]]:
    return [(read_image(e.image_path), read_label_map(e.gt_path, manifest.vocab))
            for e in manifest.entries]


def mask_union(regions: Sequence[Region], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for r in regions:
        out |= r.mask
    return out

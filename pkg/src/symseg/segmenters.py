"""Segmentation backends behind one calling convention.

A portfolio is an ordered list of named backends. Built-in kinds:

``noisy_oracle``
    Recovers the ground truth of a synthetic scene by nearest-palette-color
    decoding, then corrupts it per region: drops (miss), relabels (confusion)
    and erodes/dilates masks. Categories listed as ``strong`` are left intact.
``color_kmeans``
    Clusters pixel colors and names each cluster after the nearest palette
    color. A crude but honest image-only segmenter.
``external``
    Runs ``<cmd> <input_image> <output_labelmap> <vocab_file>`` and reads the
    label map it writes.
"""

from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import ndimage as ndi
from PIL import Image
from scipy.cluster.vq import kmeans2

from .dataset import LabelMap, LabelVocabulary, extract_regions, voc_palette, write_image

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


class SegmenterError(Exception):
    pass


class BackendFailure(SegmenterError):
    """Backend process exited nonzero, timed out or produced no output."""


class DimensionMismatch(SegmenterError):
    pass


class VocabularyMismatch(SegmenterError):
    pass


@dataclass(frozen=True)
class AlgorithmEntry:
    id: str
    kind: str
    config: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class PortfolioSpec:
    algorithms: tuple[AlgorithmEntry, ...]
    vocab: LabelVocabulary

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        ids = [a.id for a in self.algorithms]
        if len(ids) < 1:
            raise ValueError("portfolio is empty")
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate algorithm ids in portfolio: {ids}")
        for a in self.algorithms:
            if a.kind not in BACKENDS:
                raise ValueError(f"unknown backend kind {a.kind!r} for {a.id}")

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.algorithms]

    def __len__(self):
        return len(self.algorithms)

    def entry(self, algo_id: str) -> AlgorithmEntry:
        for a in self.algorithms:
            if a.id == algo_id:
                return a
        raise KeyError(f"algorithm {algo_id!r} not in portfolio {self.ids}")

    def to_dict(self) -> dict:
        return {"format": "symseg.portfolio", "version": 1,
                "categories": list(self.vocab.names), "background_id": self.vocab.background_id,
                "algorithms": [{"id": a.id, "kind": a.kind, "config": dict(a.config)}
                               for a in self.algorithms]}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "PortfolioSpec":
        vocab = LabelVocabulary(tuple(d["categories"]), d.get("background_id", 0))
        algos = []
        for a in d["algorithms"]:
            cfg = dict(a.get("config", {}))
            if base_dir is not None:
                cfg.setdefault("base_dir", str(base_dir))
            algos.append(AlgorithmEntry(a["id"], a["kind"], cfg))
        return cls(tuple(algos), vocab)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PortfolioSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def image_seed(image: np.ndarray, seed: int) -> np.random.Generator:
    digest = zlib.crc32(np.ascontiguousarray(image).tobytes())
    return np.random.default_rng([int(seed), image.shape[0], image.shape[1], digest])


def palette_decode(image: np.ndarray, vocab: LabelVocabulary) -> np.ndarray:
    """Nearest VOC palette color per pixel, restricted to the vocabulary."""
    pal = voc_palette(len(vocab)).astype(np.int32)
    px = np.asarray(image, dtype=np.int32)[..., :3]
    d = ((px[:, :, None, :] - pal[None, None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=-1).astype(np.uint8)


# -- backends ----------------------------------------------------------------

class NoisyOracle:
    def __init__(self, vocab: LabelVocabulary, strong: Sequence[str] = (), miss_rate: float = 0.0,
                 confusion: Mapping[str, str] | None = None, confusion_rate: float = 1.0,
                 morph: int = 0, seed: int = 0, **_):
        if not 0.0 <= miss_rate <= 1.0 or not 0.0 <= confusion_rate <= 1.0:
            raise ValueError("miss_rate and confusion_rate must lie in [0, 1]")
        if not isinstance(morph, (int, np.integer)):
            raise ValueError("morph must be an integer pixel radius")
        self.vocab = vocab
        self.strong = {vocab.index(c) for c in strong}
        self.miss_rate = float(miss_rate)
        self.confusion = {vocab.index(a): vocab.index(b) for a, b in (confusion or {}).items()}
        self.confusion_rate = float(confusion_rate)
        self.morph = int(morph)
        self.seed = int(seed)

    def segment(self, image: np.ndarray) -> np.ndarray:
        gt = palette_decode(image, self.vocab)
        out = gt.copy()
        rng = image_seed(image, self.seed)
        bg = self.vocab.background_id
        for region in extract_regions(LabelMap(gt, self.vocab), min_region_px=1):
            u_miss, u_conf = rng.random(2)
            if region.category in self.strong:
                continue
            label = region.category
            if u_miss < self.miss_rate:
                label = bg
            elif region.category in self.confusion and u_conf < self.confusion_rate:
                label = self.confusion[region.category]
            mask = region.mask
            if self.morph < 0:
                mask = ndi.binary_erosion(mask, iterations=-self.morph)
                out[region.mask & ~mask] = bg
            elif self.morph > 0:
                grown = ndi.binary_dilation(mask, iterations=self.morph)
                mask = mask | (grown & (gt == bg))
            out[mask] = label
        return out


class ColorKMeans:
    def __init__(self, vocab: LabelVocabulary, n_clusters: int = 4, seed: int = 0, **_):
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        self.vocab = vocab
        self.n_clusters = int(n_clusters)
        self.seed = int(seed)

    def segment(self, image: np.ndarray) -> np.ndarray:
        px = np.asarray(image, dtype=float)[..., :3].reshape(-1, 3)
        k = min(self.n_clusters, len(np.unique(px, axis=0)))
        rng = image_seed(image, self.seed)
        centers, assign = kmeans2(px, k, minit="++", seed=rng)
        pal = voc_palette(len(self.vocab)).astype(float)
        names = np.argmin(((centers[:, None, :] - pal[None]) ** 2).sum(-1), axis=1)
        return names[assign].reshape(image.shape[:2]).astype(np.uint8)


class ExternalBackend:
    def __init__(self, vocab: LabelVocabulary, cmd: str | Sequence[str], timeout: float = DEFAULT_TIMEOUT,
                 base_dir: str | None = None, **_):
        self.vocab = vocab
        self.cmd = shlex.split(cmd) if isinstance(cmd, str) else list(cmd)
        self.timeout = float(timeout)
        self.cwd = base_dir

    def segment(self, image: np.ndarray, stderr_sink: list | None = None) -> np.ndarray:
        with tempfile.TemporaryDirectory(prefix="symseg-") as tmp:
            img_p, out_p, voc_p = (Path(tmp) / n for n in ("input.png", "output.png", "vocab.txt"))
            write_image(img_p, image)
            self.vocab.write(voc_p)
            try:
                proc = subprocess.run([*self.cmd, str(img_p), str(out_p), str(voc_p)],
                                      capture_output=True, text=True, timeout=self.timeout,
                                      cwd=self.cwd)
            except subprocess.TimeoutExpired as exc:
                raise BackendFailure(f"{self.cmd[0]} timed out after {self.timeout:g} s") from exc
            except OSError as exc:
                raise BackendFailure(f"cannot start {self.cmd[0]}: {exc}") from exc
            if stderr_sink is not None and proc.stderr:
                stderr_sink.append(proc.stderr)
            if proc.returncode != 0:
                raise BackendFailure(f"{self.cmd[0]} exited with status {proc.returncode}: "
                                     f"{proc.stderr.strip()[-500:]}")
            if not out_p.is_file():
                raise BackendFailure(f"{self.cmd[0]} wrote no label map")
            try:
                with Image.open(out_p) as im:
                    mode = im.mode
                    arr = np.array(im)
            except OSError as exc:
                raise BackendFailure(f"unreadable output from {self.cmd[0]}: {exc}") from exc
            if mode not in ("L", "P"):
                raise BackendFailure(f"{self.cmd[0]} wrote a {mode} image, expected L or P")
            return arr


BACKENDS = {"noisy_oracle": NoisyOracle, "color_kmeans": ColorKMeans, "external": ExternalBackend}


def make_backend(entry: AlgorithmEntry, vocab: LabelVocabulary):
    return BACKENDS[entry.kind](vocab, **dict(entry.config))


def run_segmenter(portfolio: PortfolioSpec, algo_id: str, image: np.ndarray,
                  stderr_sink: list | None = None) -> LabelMap:
    """Run one portfolio member and validate its output against the image and vocabulary."""
    entry = portfolio.entry(algo_id)
    backend = make_backend(entry, portfolio.vocab)
    image = np.asarray(image)
    if isinstance(backend, ExternalBackend):
        raw = backend.segment(image, stderr_sink)
    else:
        raw = backend.segment(image)
    raw = np.asarray(raw)
    if raw.shape != image.shape[:2]:
        raise DimensionMismatch(
            f"{algo_id}: output shape {raw.shape} does not match image {image.shape[:2]}")
    if raw.size and (raw.min() < 0 or raw.max() >= len(portfolio.vocab)):
        raise VocabularyMismatch(
            f"{algo_id}: label {int(raw.max())} outside vocabulary of size {len(portfolio.vocab)}")
    return LabelMap(raw.astype(np.uint8), portfolio.vocab)


# -- synthetic portfolios ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticBackendSpec:
    id: str
    strong: tuple[str, ...] = ()
    miss_rate: float = 0.0
    confusion: Mapping[str, str] = field(default_factory=dict)
    confusion_rate: float = 1.0
    morph: int = 0
    seed: int = 0


@dataclass(frozen=True)
class SyntheticSpec:
    backends: tuple[SyntheticBackendSpec, ...]
    vocab: LabelVocabulary = field(default_factory=LabelVocabulary.voc)


def make_synthetic_portfolio(spec: SyntheticSpec) -> PortfolioSpec:
    if len(spec.backends) < 2:
        raise ValueError("a synthetic portfolio needs at least 2 backends")
    entries = []
    for b in spec.backends:
        cfg = {"strong": list(b.strong), "miss_rate": b.miss_rate,
               "confusion": dict(b.confusion), "confusion_rate": b.confusion_rate,
               "morph": b.morph, "seed": b.seed}
        # validate eagerly
        NoisyOracle(spec.vocab, **cfg)
        entries.append(AlgorithmEntry(b.id, "noisy_oracle", cfg))
    return PortfolioSpec(tuple(entries), spec.vocab)

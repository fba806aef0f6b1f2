"""Global image features, region attributes, PCA and equal-width discretization."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi
from scipy.signal import fftconvolve
from skimage.measure import euler_number, perimeter
from skimage.morphology import convex_hull_image

# -- image features ----------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])
_SOBEL_MAX = 4.0 * math.sqrt(2.0)


@dataclass(frozen=True)
class FeatureConfig:
    bins: int = 64
    gabor_orientations: int = 4
    gabor_frequencies: tuple[float, ...] = (0.25, 0.125, 0.0625)
    haar_level: int = 1

    def __post_init__(self):
        object.__setattr__(self, "gabor_frequencies", tuple(float(f) for f in self.gabor_frequencies))
        if self.bins < 2:
            raise ValueError("need at least 2 histogram bins")
        if self.gabor_orientations < 1 or not self.gabor_frequencies:
            raise ValueError("Gabor bank must have at least one orientation and frequency")
        if self.haar_level != 1:
            raise ValueError("only single-level Haar decomposition is supported")

    @property
    def blocks(self) -> list[tuple[str, int]]:
        """(name, length) of each histogram block, in vector order."""
        b = self.bins
        out = [("brightness", b), ("rgb_r", b), ("rgb_g", b), ("rgb_b", b), ("fft_radial", b)]
        for fi in range(len(self.gabor_frequencies)):
            for oi in range(self.gabor_orientations):
                out.append((f"gabor_f{fi}_o{oi}", b))
        out += [(f"haar_{s}", b) for s in ("ll", "lh", "hl", "hh")]
        out.append(("acutance", b))
        return out

    @property
    def dim(self) -> int:
        return sum(n for _, n in self.blocks)

    @property
    def schema_id(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return "fb1-" + hashlib.sha1(payload.encode()).hexdigest()[:12]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gabor_frequencies"] = list(self.gabor_frequencies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(bins=d["bins"], gabor_orientations=d["gabor_orientations"],
                   gabor_frequencies=tuple(d["gabor_frequencies"]), haar_level=d["haar_level"])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("feature vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature vector has non-finite entries")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def _hist(values: np.ndarray, bins: int, lo: float, hi: float, weights=None) -> np.ndarray:
    h, _ = np.histogram(values, bins=bins, range=(lo, hi), weights=weights)
    total = h.sum()
    if total <= 0:
        h = np.zeros(bins)
        h[0] = 1.0
        return h
    return h / total


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma in [0, 1] from an RGB uint8 (or float 0..255) raster."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        return img / 255.0
    return (img[..., :3] @ _LUMA) / 255.0


def fft_radial_histogram(gray: np.ndarray, bins: int) -> np.ndarray:
    """Histogram of log(1+|F|) over radial spatial frequency (cycles/pixel)."""
    mag = np.abs(np.fft.fft2(gray))
    return radial_histogram_from_spectrum(mag, bins)


def radial_histogram_from_spectrum(mag: np.ndarray, bins: int) -> np.ndarray:
    h, w = mag.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    return _hist(radius.ravel(), bins, 0.0, math.sqrt(0.5), weights=np.log1p(mag).ravel())


def gabor_kernel(frequency: float, theta: float) -> np.ndarray:
    """Complex Gabor kernel with roughly one-octave bandwidth."""
    sigma = 0.56 / frequency
    half = int(math.ceil(3 * sigma))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(float)
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    env = np.exp(-(xr ** 2 + yr ** 2) / (2 * sigma ** 2))
    return env * np.exp(2j * math.pi * frequency * xr)


def gabor_responses(gray: np.ndarray, config: FeatureConfig) -> list[np.ndarray]:
    """Normalized response magnitudes in [0, 1], frequency-major order."""
    out = []
    for f in config.gabor_frequencies:
        for oi in range(config.gabor_orientations):
            k = gabor_kernel(f, math.pi * oi / config.gabor_orientations)
            half = k.shape[0] // 2
            padded = np.pad(gray, half, mode="symmetric")
            resp = fftconvolve(padded, k, mode="valid")
            out.append(np.clip(np.abs(resp) / np.abs(k).sum(), 0.0, 1.0))
    return out


def haar_subbands(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Single-level orthonormal 2-D Haar transform: LL, LH, HL, HH."""
    g = gray
    if g.shape[0] < 2:
        g = np.repeat(g, 2, axis=0)
    if g.shape[1] < 2:
        g = np.repeat(g, 2, axis=1)
    g = g[: g.shape[0] // 2 * 2, : g.shape[1] // 2 * 2]
    a, b = g[0::2, 0::2], g[0::2, 1::2]
    c, d = g[1::2, 0::2], g[1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    gx = ndi.sobel(gray, axis=1, mode="reflect")
    gy = ndi.sobel(gray, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def extract_image_features(image: np.ndarray, config: FeatureConfig | None = None) -> FeatureVector:
    """Concatenated, individually normalized histogram bank for an RGB raster.

    Block order follows ``FeatureConfig.blocks``. Every block sums to 1.
    """
    config = config or FeatureConfig()
    img = np.asarray(image)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"zero-sized or malformed image, shape {img.shape}")
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    rgb = img[..., :3].astype(float) / 255.0
    gray = rgb @ _LUMA
    b = config.bins

    parts = [_hist(gray.ravel(), b, 0.0, 1.0)]
    parts += [_hist(rgb[..., ch].ravel(), b, 0.0, 1.0) for ch in range(3)]
    parts.append(fft_radial_histogram(gray, b))
    parts += [_hist(r.ravel(), b, 0.0, 1.0) for r in gabor_responses(gray, config)]
    ll, lh, hl, hh = haar_subbands(gray)
    parts.append(_hist(np.abs(ll).ravel(), b, 0.0, 2.0))
    parts += [_hist(np.abs(s).ravel(), b, 0.0, 1.0) for s in (lh, hl, hh)]
    parts.append(_hist(gradient_magnitude(gray).ravel(), b, 0.0, _SOBEL_MAX))
    return FeatureVector(np.concatenate(parts), config.schema_id)


def feature_block(vec: FeatureVector | np.ndarray, config: FeatureConfig, name: str) -> np.ndarray:
    values = vec.values if isinstance(vec, FeatureVector) else np.asarray(vec)
    start = 0
    for blk, n in config.blocks:
        if blk == name:
            return values[start:start + n]
        start += n
    raise KeyError(name)


# -- region attributes -------------------------------------------------------

ATTRIBUTE_FIELDS = (
    "area", "centroid_x", "centroid_y", "bbox_w", "bbox_h", "perimeter",
    "eccentricity", "orientation", "solidity", "extent", "equivalent_diameter",
    "euler_number",
)


@dataclass(frozen=True)
class RegionAttributes:
    area: int
    centroid_x: float
    centroid_y: float
    bbox: tuple[int, int, int, int]
    perimeter: float
    eccentricity: float
    orientation: float
    solidity: float
    extent: float
    equivalent_diameter: float
    euler_number: int
    convex_area: int = field(default=0, compare=False)

    def vector(self) -> np.ndarray:
        """Numeric attribute vector in ``ATTRIBUTE_FIELDS`` order."""
        return np.array([
            self.area, self.centroid_x, self.centroid_y, self.bbox[2], self.bbox[3],
            self.perimeter, self.eccentricity, self.orientation, self.solidity,
            self.extent, self.equivalent_diameter, self.euler_number,
        ], dtype=float)


def second_moments(mask: np.ndarray) -> tuple[float, float, float]:
    """Normalized second central moments (uxx, uyy, uxy), y pointing up.

    Includes the 1/12 term of a unit pixel, so a single pixel is a small disk
    rather than a point.
    """
    rows, cols = np.nonzero(mask)
    x = cols - cols.mean()
    y = -(rows - rows.mean())
    n = x.size
    uxx = float(np.sum(x * x) / n + 1 / 12)
    uyy = float(np.sum(y * y) / n + 1 / 12)
    uxy = float(np.sum(x * y) / n)
    return uxx, uyy, uxy


def ellipse_from_moments(uxx: float, uyy: float, uxy: float) -> tuple[float, float]:
    """(eccentricity, orientation in degrees, counterclockwise from +x, in (-90, 90])."""
    common = math.sqrt((uxx - uyy) ** 2 + 4 * uxy ** 2)
    major = 2 * math.sqrt(2) * math.sqrt(uxx + uyy + common)
    minor = 2 * math.sqrt(2) * math.sqrt(max(uxx + uyy - common, 0.0))
    ecc = 2 * math.sqrt(max((major / 2) ** 2 - (minor / 2) ** 2, 0.0)) / major
    if uyy > uxx:
        num, den = uyy - uxx + common, 2 * uxy
    else:
        num, den = 2 * uxy, uxx - uyy + common
    if num == 0 and den == 0:
        ori = 0.0
    else:
        ori = math.degrees(math.atan2(num, den)) if den != 0 else 90.0
        # atan(num/den) range
        if ori > 90:
            ori -= 180
        elif ori <= -90:
            ori += 180
    return min(ecc, 1.0), ori


def extract_region_attributes(mask: np.ndarray) -> RegionAttributes:
    """regionprops-style geometry of a binary mask (all set pixels form the region)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or not mask.any():
        raise ValueError("empty mask")
    rows, cols = np.nonzero(mask)
    area = int(rows.size)
    x0, y0 = int(cols.min()), int(rows.min())
    w, h = int(cols.max()) - x0 + 1, int(rows.max()) - y0 + 1
    sub = mask[y0:y0 + h, x0:x0 + w]
    ecc, ori = ellipse_from_moments(*second_moments(sub))
    convex_area = int(convex_hull_image(sub).sum()) if area > 2 else area
    convex_area = max(convex_area, area)
    return RegionAttributes(
        area=area,
        centroid_x=float(cols.mean()),
        centroid_y=float(rows.mean()),
        bbox=(x0, y0, w, h),
        perimeter=float(perimeter(sub, neighborhood=4)),
        eccentricity=ecc,
        orientation=ori,
        solidity=area / convex_area,
        extent=area / (w * h),
        equivalent_diameter=math.sqrt(4 * area / math.pi),
        euler_number=int(euler_number(sub, connectivity=2)),
        convex_area=convex_area,
    )


@dataclass(frozen=True)
class CategoryAttributeMeans:
    means: dict[int, np.ndarray]
    counts: dict[int, int]
    n_categories: int

    def present(self, category: int) -> bool:
        return self.counts.get(category, 0) > 0

    def mean(self, category: int) -> np.ndarray | None:
        return self.means.get(category) if self.present(category) else None

    def to_dict(self) -> dict:
        return {"n_categories": self.n_categories,
                "counts": {str(k): v for k, v in sorted(self.counts.items())},
                "means": {str(k): v.tolist() for k, v in sorted(self.means.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryAttributeMeans":
        return cls({int(k): np.array(v) for k, v in d["means"].items()},
                   {int(k): int(v) for k, v in d["counts"].items()}, int(d["n_categories"]))


def category_attribute_means(regions: Iterable[tuple[int, RegionAttributes | np.ndarray]],
                             n_categories: int) -> CategoryAttributeMeans:
    sums: dict[int, np.ndarray] = {}
    counts = {c: 0 for c in range(n_categories)}
    for cat, attrs in regions:
        v = attrs.vector() if isinstance(attrs, RegionAttributes) else np.asarray(attrs, float)
        sums[cat] = sums.get(cat, 0) + v
        counts[cat] = counts.get(cat, 0) + 1
    means = {c: s / counts[c] for c, s in sums.items()}
    return CategoryAttributeMeans(means, counts, n_categories)


# -- PCA ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray
    schema_id: str = ""

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def to_dict(self) -> dict:
        return {"schema_id": self.schema_id, "dim": int(self.mean.size),
                "n_components": self.n_components, "mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        comps = np.array(d["components"], dtype=float).reshape(d["n_components"], d["dim"])
        return cls(np.array(d["mean"], dtype=float), comps,
                   np.array(d["explained_variance"], dtype=float), d.get("schema_id", ""))


def _as_matrix(samples) -> tuple[np.ndarray, str]:
    if len(samples) and isinstance(samples[0], FeatureVector):
        ids = {s.schema_id for s in samples}
        if len(ids) > 1:
            raise ValueError(f"mixed feature schemas: {sorted(ids)}")
        return np.stack([s.values for s in samples]), ids.pop()
    return np.atleast_2d(np.asarray(samples, dtype=float)), ""


def fit_pca(samples: Sequence[FeatureVector] | np.ndarray, n_components: int,
            on_degenerate: str = "error") -> PcaModel:
    """Principal axes of the sample covariance, largest variance first.

    Component signs are fixed so the largest-magnitude entry is positive.
    ``on_degenerate`` is ``"error"`` or ``"warn"`` for zero-variance input.
    """
    X, schema = _as_matrix(samples)
    n, dim = X.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if not 1 <= n_components <= dim:
        raise ValueError(f"n_components must be in [1, {dim}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if not np.any(Xc):
        if on_degenerate == "error":
            raise ValueError("degenerate PCA input: all samples identical")
        warnings.warn("PCA input has zero variance", RuntimeWarning, stacklevel=2)
    full = n_components > min(n, dim)
    _, s, vt = np.linalg.svd(Xc, full_matrices=full)
    comps = vt[:n_components].copy()
    var = np.zeros(n_components)
    k = min(n_components, s.size)
    var[:k] = s[:k] ** 2 / (n - 1)
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(n_components), pivot])
    signs[signs == 0] = 1
    comps *= signs[:, None]
    return PcaModel(mean, comps, var, schema)


def project(model: PcaModel, v: FeatureVector | np.ndarray) -> np.ndarray:
    if isinstance(v, FeatureVector):
        if model.schema_id and v.schema_id != model.schema_id:
            raise ValueError(f"schema mismatch: model {model.schema_id}, vector {v.schema_id}")
        v = v.values
    v = np.asarray(v, dtype=float)
    return (v - model.mean) @ model.components.T


# -- equal-width discretization ------------------------------------------------

def discretize(x, k: int, min_f: float, max_f: float):
    """Bin index in 1..k for equal-width ranges ]w(i-1), w*i] of ``x - min_f``.

    Values at or below ``min_f`` land in bin 1, values above ``max_f`` in bin k.
    Accepts scalars or arrays.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not max_f > min_f:
        raise ValueError("max_f must exceed min_f")
    width = (max_f - min_f) / k
    idx = np.ceil((np.asarray(x, dtype=float) - min_f) / width)
    idx = np.clip(idx, 1, k).astype(int)
    return int(idx) if idx.ndim == 0 else idx

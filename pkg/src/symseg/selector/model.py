"""Trained selector models, their training routines and the selection query."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..features import (ATTRIBUTE_FIELDS, CategoryAttributeMeans, FeatureVector, PcaModel,
                        category_attribute_means, discretize, fit_pca, project)
from .bn import EMResult, LayeredBN, chunk, mutual_information
from .margin import LinearOvR
from .samples import TrainingSample

N_ATTRIBUTES = len(ATTRIBUTE_FIELDS)
FORMAT = "symseg.selector"
VERSION = 1


class SchemaMismatch(ValueError):
    pass


def _labels(samples: Sequence[TrainingSample], algorithms: Sequence[str]) -> np.ndarray:
    index = {a: i for i, a in enumerate(algorithms)}
    try:
        y = np.array([index[s.label] for s in samples])
    except KeyError as exc:
        raise ValueError(f"sample label {exc} not among algorithms {list(algorithms)}") from None
    if len(np.unique(y)) < 2:
        raise ValueError("training set needs at least two distinct labels")
    return y


def _schema(samples: Sequence[TrainingSample]) -> str:
    ids = {s.features.schema_id for s in samples}
    if len(ids) != 1:
        raise SchemaMismatch(f"training samples mix feature schemas {sorted(ids)}")
    return ids.pop()


def _attribute_table(samples: Sequence[TrainingSample]) -> tuple[np.ndarray, np.ndarray, bool]:
    """(attribute matrix with NaN for missing, column means, any-present flag)."""
    A = np.full((len(samples), N_ATTRIBUTES), np.nan)
    for i, s in enumerate(samples):
        if s.attributes is not None:
            A[i] = s.attributes
    have = ~np.isnan(A[:, 0])
    means = A[have].mean(axis=0) if have.any() else np.zeros(N_ATTRIBUTES)
    return A, means, bool(have.any())


def _category_means(samples: Sequence[TrainingSample], n_categories: int) -> CategoryAttributeMeans:
    return category_attribute_means(
        [(s.category, s.attributes) for s in samples
         if s.attributes is not None and s.category is not None], n_categories)


def _check_schema(model, features: FeatureVector) -> None:
    if features.schema_id != model.schema_id:
        raise SchemaMismatch(f"model expects features {model.schema_id}, got {features.schema_id}")


def _argmax(scores: np.ndarray) -> int:
    # first maximum = earliest in portfolio order
    return int(np.argmax(scores))


# -- max-margin variant -----------------------------------------------------------

@dataclass(eq=False)
class _Linear:
    center: np.ndarray
    scale: np.ndarray
    clf: LinearOvR

    def scores(self, z: np.ndarray) -> np.ndarray:
        return self.clf.decision((z - self.center) / self.scale)[0]

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "scale": self.scale.tolist(),
                "weights": self.clf.weights.tolist(), "bias": self.clf.bias, "C": self.clf.C}

    @classmethod
    def from_dict(cls, d: dict) -> "_Linear":
        clf = LinearOvR(C=d["C"], bias=d["bias"])
        clf.weights = np.array(d["weights"], dtype=float)
        return cls(np.array(d["center"]), np.array(d["scale"]), clf)


def _fit_linear(Z: np.ndarray, y: np.ndarray, n_classes: int, C: float, seed: int) -> _Linear:
    center = Z.mean(axis=0)
    scale = Z.std(axis=0)
    scale[scale == 0] = 1.0
    clf = LinearOvR(C=C, seed=seed).fit((Z - center) / scale, y, n_classes)
    return _Linear(center, scale, clf)


@dataclass(eq=False)
class MarginSelector:
    algorithms: list[str]
    schema_id: str
    pca: PcaModel
    attr_means: np.ndarray
    combined: _Linear
    category_means: CategoryAttributeMeans
    attributes_seen: bool = True
    features_only: _Linear | None = None   # set in "split" mode
    mode: str = "patch"
    variant: str = field(default="margin", init=False)

    @property
    def weight_dim(self) -> int:
        return self.combined.clf.weights.shape[1] - 1

    def scores(self, features: FeatureVector, attributes: np.ndarray | None = None) -> np.ndarray:
        _check_schema(self, features)
        z = project(self.pca, features.values)
        if attributes is None and self.features_only is not None:
            return self.features_only.scores(z)
        attrs = self.attr_means if attributes is None else np.asarray(attributes, dtype=float)
        return self.combined.scores(np.concatenate([z, attrs]))

    def to_dict(self) -> dict:
        return {"format": FORMAT, "version": VERSION, "variant": "margin", "mode": self.mode,
                "algorithms": self.algorithms, "schema_id": self.schema_id,
                "attribute_fields": list(ATTRIBUTE_FIELDS), "pca": self.pca.to_dict(),
                "attr_means": self.attr_means.tolist(), "attributes_seen": self.attributes_seen,
                "combined": self.combined.to_dict(),
                "features_only": self.features_only.to_dict() if self.features_only else None,
                "category_means": self.category_means.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarginSelector":
        return cls(d["algorithms"], d["schema_id"], PcaModel.from_dict(d["pca"]),
                   np.array(d["attr_means"], dtype=float), _Linear.from_dict(d["combined"]),
                   CategoryAttributeMeans.from_dict(d["category_means"]), d["attributes_seen"],
                   _Linear.from_dict(d["features_only"]) if d.get("features_only") else None,
                   d.get("mode", "patch"))


def train_margin(samples: Sequence[TrainingSample], algorithms: Sequence[str], n_pca: int = 3,
                 C: float = 1.0, seed: int = 0, mode: str = "patch",
                 n_categories: int = 21) -> MarginSelector:
    """PCA-reduced features plus attributes, linear one-vs-rest hinge-loss machines.

    Missing attributes are patched with the mean of the available ones, so a
    single model answers both whole-image and hypothesis-informed queries.
    ``mode="split"`` additionally trains a features-only machine used when no
    attributes are given.
    """
    if mode not in ("patch", "split"):
        raise ValueError(f"unknown margin mode {mode!r}")
    algorithms = list(algorithms)
    y = _labels(samples, algorithms)
    schema = _schema(samples)
    X = np.stack([s.features.values for s in samples])
    pca = fit_pca(X, min(n_pca, X.shape[1]), on_degenerate="warn")
    pca = PcaModel(pca.mean, pca.components, pca.explained_variance, schema)
    Zf = project(pca, X)
    A, means, seen = _attribute_table(samples)
    have = ~np.isnan(A[:, 0])
    A[~have] = means
    combined_rows = slice(None)
    features_only = None
    if mode == "split":
        features_only = _fit_linear(Zf, y, len(algorithms), C, seed)
        if seen and len(np.unique(y[have])) >= 2:
            combined_rows = have
    Z = np.hstack([Zf, A])[combined_rows]
    combined = _fit_linear(Z, y[combined_rows], len(algorithms), C, seed)
    return MarginSelector(algorithms, schema, pca, means, combined,
                          _category_means(samples, n_categories), seen, features_only, mode)


# -- Bayesian-network variant -------------------------------------------------------

@dataclass(eq=False)
class BayesSelector:
    algorithms: list[str]
    schema_id: str
    k: int
    feature_idx: list[int]
    feature_min: np.ndarray
    feature_max: np.ndarray
    attr_idx: list[int]
    attr_min: np.ndarray
    attr_max: np.ndarray
    bn: LayeredBN
    attr_means: np.ndarray
    category_means: CategoryAttributeMeans
    em: EMResult | None = None
    variant: str = field(default="bn", init=False)

    def evidence(self, features: FeatureVector, attributes: np.ndarray | None) -> np.ndarray:
        f = features.values[self.feature_idx]
        ev = [discretize(v, self.k, lo, hi) - 1
              for v, lo, hi in zip(f, self.feature_min, self.feature_max)]
        if attributes is None:
            ev += [-1] * len(self.attr_idx)
        else:
            a = np.asarray(attributes, dtype=float)[self.attr_idx]
            ev += [discretize(v, self.k, lo, hi) - 1
                   for v, lo, hi in zip(a, self.attr_min, self.attr_max)]
        return np.array(ev, dtype=int)

    def scores(self, features: FeatureVector, attributes: np.ndarray | None = None) -> np.ndarray:
        _check_schema(self, features)
        return self.bn.posterior(self.evidence(features, attributes)[None, :])[0]

    def to_dict(self) -> dict:
        return {"format": FORMAT, "version": VERSION, "variant": "bn", "algorithms": self.algorithms,
                "schema_id": self.schema_id, "k": self.k,
                "attribute_fields": list(ATTRIBUTE_FIELDS),
                "feature_idx": self.feature_idx, "feature_min": self.feature_min.tolist(),
                "feature_max": self.feature_max.tolist(), "attr_idx": self.attr_idx,
                "attr_min": self.attr_min.tolist(), "attr_max": self.attr_max.tolist(),
                "network": self.bn.to_dict(), "attr_means": self.attr_means.tolist(),
                "category_means": self.category_means.to_dict(),
                "em": None if self.em is None else {"n_iter": self.em.n_iter,
                                                     "converged": self.em.converged,
                                                     "log_likelihood": self.em.log_likelihood}}

    @classmethod
    def from_dict(cls, d: dict) -> "BayesSelector":
        em = d.get("em")
        return cls(d["algorithms"], d["schema_id"], d["k"], d["feature_idx"],
                   np.array(d["feature_min"]), np.array(d["feature_max"]), d["attr_idx"],
                   np.array(d["attr_min"]), np.array(d["attr_max"]),
                   LayeredBN.from_dict(d["network"]), np.array(d["attr_means"]),
                   CategoryAttributeMeans.from_dict(d["category_means"]),
                   EMResult(em["n_iter"], em["converged"], em["log_likelihood"]) if em else None)


def _ranges(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.nanmin(M, axis=0), np.nanmax(M, axis=0)


def _codes(M: np.ndarray, lo: np.ndarray, hi: np.ndarray, k: int) -> np.ndarray:
    """Zero-based discretized codes, -1 for NaN; constant columns map to 0."""
    out = np.full(M.shape, -1, dtype=int)
    for j in range(M.shape[1]):
        col = M[:, j]
        ok = ~np.isnan(col)
        if hi[j] > lo[j]:
            out[ok, j] = discretize(col[ok], k, lo[j], hi[j]) - 1
        else:
            out[ok, j] = 0
    return out


def train_bn(samples: Sequence[TrainingSample], algorithms: Sequence[str], k: int = 6,
             max_feature_nodes: int = 10, max_attribute_nodes: int = 4, fan_in: int = 5,
             hidden_states: int | None = 0, max_iter: int = 200, tol: float = 1e-6,
             prior_count: float = 0.0, seed: int = 0, n_categories: int = 21) -> BayesSelector:
    """Discretize, pick the most informative inputs and fit the network by EM.

    Feature and attribute nodes are chosen by mutual information with the
    label. Inputs are grouped ``fan_in`` at a time under hidden nodes with
    ``hidden_states`` states (0 means one per algorithm; ``None`` wires the
    inputs straight into the algorithm node).
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    algorithms = list(algorithms)
    y = _labels(samples, algorithms)
    schema = _schema(samples)
    n_cls = len(algorithms)
    X = np.stack([s.features.values for s in samples])
    A, means, _ = _attribute_table(samples)

    f_lo, f_hi = _ranges(X)
    usable = np.flatnonzero(f_hi > f_lo)
    f_codes = _codes(X[:, usable], f_lo[usable], f_hi[usable], k)
    mi = mutual_information(f_codes, y, k, n_cls)
    top = usable[np.argsort(-mi, kind="stable")[:max_feature_nodes]]
    feature_idx = sorted(int(i) for i in top)

    attr_idx: list[int] = []
    have = ~np.isnan(A[:, 0])
    if have.any() and max_attribute_nodes > 0:
        a_lo, a_hi = _ranges(A[have])
        a_usable = np.flatnonzero(a_hi > a_lo)
        if a_usable.size:
            a_codes = _codes(A[have][:, a_usable], a_lo[a_usable], a_hi[a_usable], k)
            a_mi = mutual_information(a_codes, y[have], k, n_cls)
            attr_idx = sorted(int(i) for i in a_usable[np.argsort(-a_mi, kind="stable")
                                                      [:max_attribute_nodes]])
    if attr_idx:
        a_lo, a_hi = _ranges(A[have][:, attr_idx])
    else:
        a_lo = a_hi = np.zeros(0)

    ev = np.hstack([_codes(X[:, feature_idx], f_lo[feature_idx], f_hi[feature_idx], k),
                    _codes(A[:, attr_idx], a_lo, a_hi, k) if attr_idx
                    else np.zeros((len(samples), 0), dtype=int)])
    n_f = len(feature_idx)
    names = [f"feature_{i}" for i in feature_idx] + [f"attr_{ATTRIBUTE_FIELDS[i]}" for i in attr_idx]
    groups, kinds = [], []
    for g in chunk(list(range(n_f)), fan_in):
        groups.append(g)
        kinds.append("features")
    for g in chunk(list(range(n_f, n_f + len(attr_idx))), fan_in):
        groups.append(g)
        kinds.append("attributes")
    h = n_cls if hidden_states == 0 else hidden_states
    bn = LayeredBN([k] * ev.shape[1], n_cls, groups if h is not None else None, h, names,
                   kinds if h is not None else None)
    em = bn.fit_em(ev, y, max_iter=max_iter, tol=tol, prior_count=prior_count, seed=seed)
    return BayesSelector(algorithms, schema, k, feature_idx, f_lo[feature_idx], f_hi[feature_idx],
                         attr_idx, a_lo, a_hi, bn, means, _category_means(samples, n_categories), em)


# -- common surface -------------------------------------------------------------------

SelectorModel = MarginSelector | BayesSelector


def select(model: SelectorModel, features: FeatureVector, attributes: np.ndarray | None = None,
           exclude: Sequence[str] = ()) -> tuple[str | None, dict[str, float]]:
    """Best algorithm for the query and the per-algorithm scores.

    Algorithms in ``exclude`` are never returned (``None`` when all are
    excluded); ties go to the earliest algorithm in portfolio order.
    """
    scores = model.scores(features, attributes)
    table = {a: float(s) for a, s in zip(model.algorithms, scores)}
    allowed = np.array([a not in exclude for a in model.algorithms])
    if not allowed.any():
        return None, table
    masked = np.where(allowed, scores, -np.inf)
    return model.algorithms[_argmax(masked)], table


def save_model(model: SelectorModel, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")


def model_from_dict(d: dict) -> SelectorModel:
    if d.get("format") != FORMAT:
        raise ValueError("not a selector model file")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported selector model version {d.get('version')}")
    if d["variant"] == "margin":
        return MarginSelector.from_dict(d)
    if d["variant"] == "bn":
        return BayesSelector.from_dict(d)
    raise ValueError(f"unknown selector variant {d['variant']!r}")


def load_model(path: str | os.PathLike) -> SelectorModel:
    return model_from_dict(json.loads(Path(path).read_text()))

"""Discrete Bayesian network for algorithm selection, fit with EM.

Structure: a constant application-specification node and the hidden nodes
(or, with ``hidden_states=None``, the input nodes themselves) are the parents
of the algorithm node. Each hidden node has as parents one group of observed
input nodes (attribute or feature variables). Input nodes are roots with
their own prior. Any input may be unobserved; it is then summed out under its
prior.

Evidence is an integer array with one column per input, values in
``0..k_i-1`` and ``-1`` for missing.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# einsum axis letters for parents; z (sample), h (hidden), A (application), Y (class) are reserved
_LETTERS = "abcdefgijklmnopqrstuvwxBCDEFGHIJKLMNOPQRSTUVWX"


class EMConvergenceWarning(RuntimeWarning):
    pass


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    total = counts.sum(axis=-1, keepdims=True)
    k = counts.shape[-1]
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, counts / safe, 1.0 / k)


@dataclass
class EMResult:
    n_iter: int
    converged: bool
    log_likelihood: list[float] = field(default_factory=list)


class LayeredBN:
    def __init__(self, input_states: list[int], n_classes: int, groups: list[list[int]] | None = None,
                 hidden_states: int | None = None, input_names: list[str] | None = None,
                 group_kinds: list[str] | None = None):
        self.input_states = [int(k) for k in input_states]
        self.n_classes = int(n_classes)
        self.hidden_states = hidden_states
        self.input_names = input_names or [f"x{i}" for i in range(len(input_states))]
        m = len(self.input_states)
        if hidden_states is None:
            self.groups = [[i] for i in range(m)]
        else:
            self.groups = groups if groups is not None else [list(range(m))]
            if sorted(i for g in self.groups for i in g) != list(range(m)):
                raise ValueError("groups must partition the inputs")
        self.group_kinds = group_kinds or ["input"] * len(self.groups)
        self.priors = [np.full(k, 1.0 / k) for k in self.input_states]
        if hidden_states is None:
            self.hidden_cpts: list[np.ndarray] = []
            y_parents = self.input_states
        else:
            self.hidden_cpts = [np.full([self.input_states[i] for i in g] + [hidden_states],
                                        1.0 / hidden_states) for g in self.groups]
            y_parents = [hidden_states] * len(self.groups)
        # leading axis: application-specification node, one constant state
        self.app_states = 1
        self.class_cpt = np.full([self.app_states, *y_parents, self.n_classes], 1.0 / self.n_classes)

    # -- structure description ------------------------------------------------

    def structure(self) -> dict:
        nodes = [{"name": "application", "states": self.app_states, "parents": []}]
        nodes += [{"name": n, "states": k, "parents": []}
                  for n, k in zip(self.input_names, self.input_states)]
        if self.hidden_states is None:
            y_par = ["application", *self.input_names]
        else:
            y_par = ["application"]
            for gi, g in enumerate(self.groups):
                name = f"hidden_{self.group_kinds[gi]}_{gi}"
                nodes.append({"name": name, "states": self.hidden_states,
                              "parents": [self.input_names[i] for i in g]})
                y_par.append(name)
        nodes.append({"name": "algorithm", "states": self.n_classes, "parents": y_par})
        return {"nodes": nodes}

    def cpts(self) -> list[np.ndarray]:
        return [*self.priors, *self.hidden_cpts, self.class_cpt]

    # -- inference --------------------------------------------------------------

    def _input_weights(self, X: np.ndarray) -> list[np.ndarray]:
        out = []
        for i, k in enumerate(self.input_states):
            col = X[:, i]
            w = np.empty((X.shape[0], k))
            miss = col < 0
            w[miss] = self.priors[i]
            w[~miss] = np.eye(k)[col[~miss]]
            out.append(w)
        return out

    def _group_messages(self, W: list[np.ndarray]) -> list[np.ndarray]:
        if self.hidden_states is None:
            return W
        msgs = []
        for g, cpt in zip(self.groups, self.hidden_cpts):
            letters = _LETTERS[:len(g)]
            spec = ",".join("z" + c for c in letters) + f",{letters}h->zh"
            msgs.append(np.einsum(spec, *[W[i] for i in g], cpt, optimize=True))
        return msgs

    def _y_spec(self, n_par: int, drop: int | None = None, out: str = "zY") -> str:
        letters = _LETTERS[:n_par]
        ops = ["z" + c for j, c in enumerate(letters) if j != drop]
        return ",".join(ops) + f",A{letters}Y,zY->{out}"

    def posterior(self, X: np.ndarray) -> np.ndarray:
        """P(algorithm | evidence), shape (n, n_classes)."""
        X = np.atleast_2d(np.asarray(X, dtype=int))
        msgs = self._group_messages(self._input_weights(X))
        letters = _LETTERS[:len(msgs)]
        spec = ",".join("z" + c for c in letters) + f",A{letters}Y->zY"
        joint = np.einsum(spec, *msgs, self.class_cpt, optimize=True)
        return joint / joint.sum(axis=1, keepdims=True)

    # -- learning -----------------------------------------------------------------

    def _estep(self, X: np.ndarray, y: np.ndarray | None):
        n = X.shape[0]
        W = self._input_weights(X)
        msgs = self._group_messages(W)
        wy = np.ones((n, self.n_classes))
        if y is not None:
            lab = np.asarray(y)
            known = lab >= 0
            wy[known] = np.eye(self.n_classes)[lab[known]]
        G = len(msgs)
        letters = _LETTERS[:G]
        fam = np.einsum(",".join("z" + c for c in letters) + f",A{letters}Y,zY->zA{letters}Y",
                        *msgs, self.class_cpt, wy, optimize=True)
        Z = fam.reshape(n, -1).sum(axis=1)
        Z = np.maximum(Z, np.finfo(float).tiny)
        inv = 1.0 / Z
        class_counts = np.einsum("z...,z->...", fam, inv)
        ll = float(np.log(Z).sum())
        for i, k in enumerate(self.input_states):
            obs = X[:, i] >= 0
            if obs.any():
                ll += float(np.log(np.maximum(self.priors[i][X[obs, i]], np.finfo(float).tiny)).sum())
        hidden_counts = []
        if self.hidden_states is None:
            marg = class_counts.sum(axis=(0, -1))
            prior_counts = []
            for i in range(len(self.input_states)):
                axes = tuple(j for j in range(marg.ndim) if j != i)
                prior_counts.append(marg.sum(axis=axes) if axes else marg)
        else:
            prior_counts = [None] * len(self.input_states)
            for gi, (g, cpt) in enumerate(zip(self.groups, self.hidden_cpts)):
                # message into hidden node gi from the algorithm side
                others = [msgs[j] for j in range(G) if j != gi]
                spec = self._y_spec(G, drop=gi, out="z" + letters[gi])
                r = np.einsum(spec, *others, self.class_cpt, wy, optimize=True)
                gl = _LETTERS[:len(g)]
                spec2 = ",".join("z" + c for c in gl) + f",{gl}h,zh,z->{gl}h"
                cnt = np.einsum(spec2, *[W[i] for i in g], cpt, r, inv, optimize=True)
                hidden_counts.append(cnt)
                marg = cnt.sum(axis=-1)
                for pos, i in enumerate(g):
                    axes = tuple(j for j in range(marg.ndim) if j != pos)
                    prior_counts[i] = marg.sum(axis=axes) if axes else marg
        return ll, class_counts, hidden_counts, prior_counts

    def _mstep(self, class_counts, hidden_counts, prior_counts, prior_count: float):
        self.class_cpt = _normalize_rows(class_counts + prior_count)
        self.hidden_cpts = [_normalize_rows(c + prior_count) for c in hidden_counts]
        self.priors = [_normalize_rows(c + prior_count) for c in prior_counts]

    def randomize(self, rng: np.random.Generator) -> None:
        if self.hidden_states is not None:
            self.hidden_cpts = [rng.dirichlet(np.ones(self.hidden_states), size=c.shape[:-1])
                                for c in self.hidden_cpts]
            self.class_cpt = rng.dirichlet(np.ones(self.n_classes), size=self.class_cpt.shape[:-1])

    def fit_em(self, X: np.ndarray, y: np.ndarray | None, max_iter: int = 200, tol: float = 1e-6,
               prior_count: float = 0.0, seed: int = 0) -> EMResult:
        """Maximum-likelihood parameters by EM; missing inputs (and labels) allowed.

        Stops when the log-likelihood gains less than ``tol`` or after
        ``max_iter`` iterations; in the latter case warns and keeps the best
        iterate.
        """
        X = np.atleast_2d(np.asarray(X, dtype=int))
        rng = np.random.default_rng(seed)
        for i, k in enumerate(self.input_states):
            col = X[:, i]
            obs = col[col >= 0]
            if obs.size:
                self.priors[i] = _normalize_rows(np.bincount(obs, minlength=k).astype(float))
        self.randomize(rng)
        history: list[float] = []
        best_ll, best_params = -np.inf, None
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            ll, cc, hc, pc = self._estep(X, y)
            history.append(ll)
            if ll > best_ll:
                best_ll, best_params = ll, self._snapshot()
            if len(history) > 1 and history[-1] - history[-2] < tol:
                converged = True
                break
            self._mstep(cc, hc, pc, prior_count)
        else:
            # score the final M-step too
            ll, *_ = self._estep(X, y)
            history.append(ll)
            if ll > best_ll:
                best_ll, best_params = ll, self._snapshot()
        self._restore(best_params)
        if not converged:
            warnings.warn(f"EM did not converge in {max_iter} iterations "
                          f"(last gain {history[-1] - history[-2]:.3g})", EMConvergenceWarning,
                          stacklevel=2)
        return EMResult(it, converged, history)

    def _snapshot(self):
        return ([p.copy() for p in self.priors], [c.copy() for c in self.hidden_cpts],
                self.class_cpt.copy())

    def _restore(self, snap) -> None:
        if snap is None:
            return
        self.priors, self.hidden_cpts, self.class_cpt = ([p.copy() for p in snap[0]],
                                                         [c.copy() for c in snap[1]],
                                                         snap[2].copy())

    # -- serialization --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {"input_states": self.input_states, "n_classes": self.n_classes,
                "groups": self.groups, "hidden_states": self.hidden_states,
                "input_names": self.input_names, "group_kinds": self.group_kinds,
                "structure": self.structure(),
                "priors": [p.tolist() for p in self.priors],
                "hidden_cpts": [c.tolist() for c in self.hidden_cpts],
                "class_cpt": self.class_cpt.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LayeredBN":
        bn = cls(d["input_states"], d["n_classes"], d["groups"], d["hidden_states"],
                 d["input_names"], d["group_kinds"])
        bn.priors = [np.array(p, dtype=float) for p in d["priors"]]
        bn.hidden_cpts = [np.array(c, dtype=float) for c in d["hidden_cpts"]]
        bn.class_cpt = np.array(d["class_cpt"], dtype=float)
        return bn


def mutual_information(codes: np.ndarray, y: np.ndarray, k: int, n_classes: int) -> np.ndarray:
    """MI (nats) between each discretized column of ``codes`` (values 0..k-1) and ``y``."""
    n, d = codes.shape
    joint = np.zeros((d, k, n_classes))
    for c in range(n_classes):
        sel = codes[y == c]
        for v in range(k):
            joint[:, v, c] = (sel == v).sum(axis=0)
    joint /= n
    px = joint.sum(axis=2, keepdims=True)
    py = joint.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(joint / (px * py)), 0.0)
    return terms.sum(axis=(1, 2))


def chunk(indices: list[int], fan_in: int) -> list[list[int]]:
    """Split into ceil(n/fan_in) nearly equal consecutive chunks."""
    if not indices:
        return []
    n_chunks = -(-len(indices) // fan_in)
    return [[int(i) for i in c] for c in np.array_split(np.array(indices), n_chunks) if len(c)]

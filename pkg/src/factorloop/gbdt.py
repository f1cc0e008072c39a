"""Gradient-boosted regression trees with exact greedy split search.

Squared-error loss, so g = prediction - y and h = 1. Trees grow leaf-wise
(best-gain leaf first) up to ``max_leaves`` / ``max_depth``. A split is kept
only if its regularized gain

    G = 1/2 [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)] - gamma

is positive. Rows with a missing feature follow the direction that scored the
higher gain at fit time.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 200
    learning_rate: float = 0.05
    max_leaves: int = 31
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_samples_leaf: int = 20

    def __post_init__(self):
        if self.n_trees < 0:
            raise ValueError("n_trees must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_leaves < 1 or self.max_depth < 0:
            raise ValueError("max_leaves >= 1 and max_depth >= 0 required")
        if self.reg_lambda < 0 or self.gamma < 0:
            raise ValueError("penalties must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")


@dataclass
class Tree:
    feature: list = field(default_factory=list)  # -1 for leaves
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    default_left: list = field(default_factory=list)
    value: list = field(default_factory=list)  # leaf weight w_j (unshrunk)
    sum_g: list = field(default_factory=list)
    sum_h: list = field(default_factory=list)
    gain: list = field(default_factory=list)  # realized split gain, 0 for leaves
    depth: list = field(default_factory=list)

    def add_node(self, sum_g, sum_h, depth, lam) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.default_left.append(True)
        self.value.append(-sum_g / (sum_h + lam) if sum_h + lam > 0 else 0.0)
        self.sum_g.append(float(sum_g))
        self.sum_h.append(float(sum_h))
        self.gain.append(0.0)
        self.depth.append(depth)
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def leaf_ids(self):
        return [i for i, f in enumerate(self.feature) if f < 0]

    def arrays(self):
        return (
            np.asarray(self.feature, dtype=int),
            np.asarray(self.threshold, dtype=float),
            np.asarray(self.left, dtype=int),
            np.asarray(self.right, dtype=int),
            np.asarray(self.default_left, dtype=bool),
            np.asarray(self.value, dtype=float),
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        feat, thr, left, right, dleft, _ = self.arrays()
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        for _ in range(max(self.depth, default=0) + 1):
            f = feat[node]
            active = f >= 0
            if not active.any():
                break
            x = X[rows, np.where(active, f, 0)]
            go_left = np.where(np.isnan(x), dleft[node], x <= thr[node])
            node = np.where(active, np.where(go_left, left[node], right[node]), node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value, dtype=float)[self.apply(X)]

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "Tree":
        return cls(**{k: list(v) for k, v in d.items()})


@dataclass
class GbdtModel:
    names: tuple
    params: GbdtParams
    base_score: float
    trees: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)  # 1/2 sum (y - yhat)^2 after each round, index 0 = base
    objective: list = field(default_factory=list)  # per-round regularized objective

    def predict(self, X: np.ndarray, names=None) -> np.ndarray:
        X = _check_columns(X, names, self.names)
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.params.learning_rate * tree.predict(X)
        return out

    def to_json(self) -> dict:
        return {
            "kind": "gbdt",
            "version": 1,
            "names": list(self.names),
            "params": asdict(self.params),
            "base_score": self.base_score,
            "trees": [t.to_json() for t in self.trees],
            "train_loss": list(self.train_loss),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GbdtModel":
        return cls(
            names=tuple(d["names"]),
            params=GbdtParams(**d["params"]),
            base_score=float(d["base_score"]),
            trees=[Tree.from_json(t) for t in d["trees"]],
            train_loss=list(d.get("train_loss", [])),
        )


class ColumnMismatch(ValueError):
    pass


def _check_columns(X, names, expected):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(expected):
        raise ColumnMismatch(f"expected {len(expected)} columns {list(expected)}, got shape {X.shape}")
    if names is not None and tuple(names) != tuple(expected):
        raise ColumnMismatch(f"columns {list(names)} do not match training columns {list(expected)}")
    return X


def split_gain(gl, hl, gr, hr, lam, gamma):
    g, h = gl + gr, hl + hr
    return 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - g * g / (h + lam)) - gamma


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    default_left: bool
    left_mask: np.ndarray  # over node rows


def _best_split(X, g, h, rows, sorted_rows, params: GbdtParams) -> _Split | None:
    lam, gamma, msl = params.reg_lambda, params.gamma, params.min_samples_leaf
    G, H = g[rows].sum(), h[rows].sum()
    best = None
    n_node = rows.size
    for f, srt in enumerate(sorted_rows):
        m = srt.size
        if m < 2:
            continue
        x = X[srt, f]
        cg = np.cumsum(g[srt])[:-1]
        ch = np.cumsum(h[srt])[:-1]
        boundary = x[:-1] < x[1:]
        n_left = np.arange(1, m)
        n_miss = n_node - m
        gm = G - (cg[-1] + g[srt[-1]]) if n_miss else 0.0
        hm = H - (ch[-1] + h[srt[-1]]) if n_miss else 0.0
        options = [(False, cg, ch, n_left)]  # missing -> right
        if n_miss:
            options.append((True, cg + gm, ch + hm, n_left + n_miss))
        for miss_left, gl, hl, nl in options:
            ok = boundary & (nl >= msl) & (n_node - nl >= msl)
            if not ok.any():
                continue
            gr, hr = G - gl, H - hl
            gains = np.where(ok, split_gain(gl, hl, gr, hr, lam, gamma), -np.inf)
            k = int(np.argmax(gains))
            gain = float(gains[k])
            if best is None or gain > best.gain:
                lo, hi = x[k], x[k + 1]
                thr = lo + (hi - lo) / 2.0
                if not lo <= thr < hi:
                    thr = lo
                if n_miss:
                    dleft = miss_left
                else:
                    dleft = bool(hl[k] >= H - hl[k])
                best = _Split(gain, f, float(thr), dleft, None)
    if best is None:
        return None
    xf = X[rows, best.feature]
    best.left_mask = np.where(np.isnan(xf), best.default_left, xf <= best.threshold)
    return best


def fit_gbdt(X: np.ndarray, y: np.ndarray, params: GbdtParams = GbdtParams(), names=None) -> GbdtModel:
    """Boost ``params.n_trees`` regression trees on rows with finite ``y``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(y)
    X, y = X[keep], y[keep]
    if names is None:
        names = tuple(f"f{i}" for i in range(X.shape[1]))
    if y.size == 0:
        raise ValueError("no finite targets")
    base = float(y.mean())
    model = GbdtModel(tuple(names), params, base)
    pred = np.full(y.shape, base)
    model.train_loss.append(0.5 * float(((y - pred) ** 2).sum()))
    lam, eta = params.reg_lambda, params.learning_rate
    # presort once; children inherit order through stable filtering
    finite = ~np.isnan(X)
    root_sorted = [np.nonzero(finite[:, f])[0][np.argsort(X[finite[:, f], f], kind="stable")] for f in range(X.shape[1])]
    all_rows = np.arange(y.size)
    h = np.ones_like(y)
    for _ in range(params.n_trees):
        g = pred - y
        tree, leaf_rows = _grow(X, g, h, all_rows, root_sorted, params)
        values = np.asarray(tree.value)
        step = np.zeros_like(y)
        for leaf, rows in leaf_rows.items():
            step[rows] = values[leaf]
        pred = pred + eta * step
        model.trees.append(tree)
        loss = 0.5 * float(((y - pred) ** 2).sum())
        model.train_loss.append(loss)
        leaves = tree.leaf_ids()
        model.objective.append(loss + params.gamma * len(leaves) + 0.5 * lam * float(sum(values[j] ** 2 for j in leaves)))
    return model


def _grow(X, g, h, rows, sorted_rows, params: GbdtParams):
    lam = params.reg_lambda
    tree = Tree()
    root = tree.add_node(g[rows].sum(), h[rows].sum(), 0, lam)
    leaf_rows = {root: rows}
    leaf_sorted = {root: sorted_rows}
    heap = []
    counter = 0

    def consider(node):
        nonlocal counter
        if tree.depth[node] >= params.max_depth:
            return
        sp = _best_split(X, g, h, leaf_rows[node], leaf_sorted[node], params)
        if sp is not None and sp.gain > 0:
            heapq.heappush(heap, (-sp.gain, node, counter, sp))
            counter += 1

    consider(root)
    while heap and tree.n_leaves < params.max_leaves:
        _, node, _, sp = heapq.heappop(heap)
        rows = leaf_rows.pop(node)
        srt = leaf_sorted.pop(node)
        go_left = np.zeros(X.shape[0], dtype=bool)
        go_left[rows[sp.left_mask]] = True
        lrows, rrows = rows[sp.left_mask], rows[~sp.left_mask]
        d = tree.depth[node] + 1
        li = tree.add_node(g[lrows].sum(), h[lrows].sum(), d, lam)
        ri = tree.add_node(g[rrows].sum(), h[rrows].sum(), d, lam)
        tree.feature[node] = sp.feature
        tree.threshold[node] = sp.threshold
        tree.left[node] = li
        tree.right[node] = ri
        tree.default_left[node] = bool(sp.default_left)
        tree.gain[node] = sp.gain
        leaf_rows[li], leaf_rows[ri] = lrows, rrows
        leaf_sorted[li] = [s[go_left[s]] for s in srt]
        leaf_sorted[ri] = [s[~go_left[s]] for s in srt]
        consider(li)
        consider(ri)
    for node in list(leaf_rows):
        tree.value[node] = -tree.sum_g[node] / (tree.sum_h[node] + lam) if tree.sum_h[node] + lam > 0 else 0.0
    # internal nodes keep their value for reference only
    return tree, leaf_rows


def recompute_gain(tree: Tree, node: int, lam: float, gamma: float) -> float:
    l, r = tree.left[node], tree.right[node]
    return split_gain(tree.sum_g[l], tree.sum_h[l], tree.sum_g[r], tree.sum_h[r], lam, gamma)


def feature_importance(model: GbdtModel) -> list[tuple[str, float, int]]:
    """(name, total gain, split count) sorted by gain, descending."""
    if not model.trees:
        return []
    gain = np.zeros(len(model.names))
    freq = np.zeros(len(model.names), dtype=int)
    for tree in model.trees:
        for f, gn in zip(tree.feature, tree.gain):
            if f >= 0:
                gain[f] += gn
                freq[f] += 1
    order = sorted(range(len(model.names)), key=lambda i: (-gain[i], i))
    return [(model.names[i], float(gain[i]), int(freq[i])) for i in order]

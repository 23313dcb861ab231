"""Gradient-boosted regression trees as a fast stand-in for the EM stress solver.

Features, in order: current density j (A/m^2), diffusivity D (m^2/s),
normalised position x/L, temperature T (K).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import TechParams
from .em import DEFAULT_POINTS, EmSegment, diffusivity, drift_force, transient_solve
from .errors import ValidationError

FEATURES = ("j", "D", "x_norm", "T_K")
N_FEATURES = len(FEATURES)
TARGET_MODES = ("steady", "transient")


@dataclass(frozen=True)
class SamplingConfig:
    count: int = 10_000
    seed: int = 0
    j_range: tuple = (1e8, 5e10)  # A/m^2, sampled log-uniformly
    T_range: tuple = (300.0, 420.0)  # K
    L_range: tuple = (10e-6, 200e-6)  # m
    mode: str = "steady"
    t_query: float = 0.05  # transient mode: query time in units of L^2/kappa
    n_points: int = DEFAULT_POINTS

    def __post_init__(self):
        if self.count < 0:
            raise ValidationError("count must be >= 0")
        for name in ("j_range", "T_range", "L_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValidationError(f"{name} must satisfy 0 < lo <= hi")
        if self.mode not in TARGET_MODES:
            raise ValidationError(f"mode must be one of {TARGET_MODES}")
        if not (self.t_query > 0):
            raise ValidationError("t_query must be > 0")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, 4)
    target: np.ndarray  # (n,) Pa
    length: np.ndarray  # (n,) m, kept for oracle rechecks; not a model input

    def __len__(self):
        return len(self.target)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.target[idx], self.length[idx])

    def split(self, train_fraction: float = 0.8):
        k = int(round(train_fraction * len(self)))
        return self.subset(slice(0, k)), self.subset(slice(k, None))

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*FEATURES, "sigma_Pa"])
            for row, y in zip(self.features, self.target):
                w.writerow([f"{v:.17g}" for v in (*row, y)])

    @classmethod
    def load_csv(cls, path) -> "Dataset":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"file not found: {path}")
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != [*FEATURES, "sigma_Pa"]:
            raise ValidationError(f"{path}: expected header {[*FEATURES, 'sigma_Pa']}")
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(-1, N_FEATURES + 1)
        return cls(features=data[:, :N_FEATURES], target=data[:, N_FEATURES], length=np.full(len(data), np.nan))


def unit_profile(t_query: float, n_points: int = DEFAULT_POINTS) -> np.ndarray:
    """Stress profile sigma / (G L) at time ``t_query * L^2 / kappa`` from a stress-free start.

    Computed with the physics solver on a reference segment; the normalised
    result does not depend on which segment is used.
    """
    ref = EmSegment(0, 50e-6, 1e-6, 5e-7, 1e10, 350.0, n_points=n_points)
    hist = transient_solve(ref, t_end=t_query * ref.tau, save_every=10**9)
    return hist.final.sigma / (ref.G * ref.length)


def gen_dataset(sampling: SamplingConfig, tech: TechParams = TechParams()) -> Dataset:
    """Random EM operating points labelled by the physics engine, shuffled with the seed."""
    rng = np.random.default_rng(sampling.seed)
    n = sampling.count
    lj = rng.uniform(np.log(sampling.j_range[0]), np.log(sampling.j_range[1]), n)
    j = np.exp(lj)
    T = rng.uniform(*sampling.T_range, n)
    L = rng.uniform(*sampling.L_range, n)
    x = rng.uniform(0.0, 1.0, n)
    G = drift_force(j, T, tech)
    if sampling.mode == "steady":
        target = G * L / 2.0
    else:
        xi = np.linspace(0.0, 1.0, sampling.n_points)
        target = G * L * np.interp(x, xi, unit_profile(sampling.t_query, sampling.n_points))
    feats = np.column_stack([j, diffusivity(T, tech), x, T]) if n else np.zeros((0, N_FEATURES))
    order = rng.permutation(n)
    return Dataset(features=feats[order], target=np.asarray(target, dtype=float)[order], length=L[order])


@dataclass(frozen=True)
class Hyper:
    rounds: int = 200
    depth: int = 4
    learning_rate: float = 0.1
    min_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if not (1 <= self.depth <= 10):
            raise ValidationError("depth must be in [1, 10]")
        if not (0 < self.learning_rate <= 1):
            raise ValidationError("learning_rate must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValidationError("min_leaf must be >= 1")
        if not (0 < self.subsample <= 1):
            raise ValidationError("subsample must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat preorder tree; ``feature == -1`` marks a leaf. Rows with ``z <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, Z: np.ndarray) -> np.ndarray:
        node = np.zeros(len(Z), dtype=int)
        rows = np.arange(len(Z))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            r = rows[inner]
            go_left = Z[r, f[inner]] <= self.threshold[node[inner]]
            node[r] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def to_record(self, k: int = 0) -> dict:
        if self.feature[k] < 0:
            return {"leaf": float(self.value[k])}
        return {"feature": int(self.feature[k]), "threshold": float(self.threshold[k]),
                "left": self.to_record(int(self.left[k])), "right": self.to_record(int(self.right[k]))}

    @classmethod
    def from_record(cls, rec: dict) -> "Tree":
        cols = {"feature": [], "threshold": [], "left": [], "right": [], "value": []}

        def walk(r):
            k = len(cols["feature"])
            for c in cols.values():
                c.append(0)
            if "leaf" in r:
                cols["feature"][k], cols["threshold"][k], cols["value"][k] = -1, 0.0, float(r["leaf"])
                cols["left"][k] = cols["right"][k] = -1
                return k
            cols["feature"][k], cols["threshold"][k], cols["value"][k] = int(r["feature"]), float(r["threshold"]), 0.0
            cols["left"][k] = walk(r["left"])
            cols["right"][k] = walk(r["right"])
            return k

        walk(rec)
        return cls(feature=np.array(cols["feature"], dtype=int), threshold=np.array(cols["threshold"], dtype=float),
                   left=np.array(cols["left"], dtype=int), right=np.array(cols["right"], dtype=int),
                   value=np.array(cols["value"], dtype=float))


def _fit_tree(Z, y, depth, min_leaf) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for c, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            c.append(v)
        return len(feature) - 1

    def best_split(idx):
        yy = y[idx]
        n = len(idx)
        total = yy.sum()
        base = total * total / n
        best = (0.0, -1, 0.0, None)
        k = np.arange(1, n)
        valid_k = (k >= min_leaf) & (n - k >= min_leaf)
        for f in range(Z.shape[1]):
            zs = Z[idx, f]
            order = np.argsort(zs, kind="stable")
            zs = zs[order]
            cs = np.cumsum(yy[order])[:-1]
            ok = valid_k & (zs[:-1] < zs[1:])
            if not ok.any():
                continue
            gain = cs * cs / k + (total - cs) ** 2 / (n - k) - base
            gain = np.where(ok, gain, -np.inf)
            m = int(np.argmax(gain))
            if gain[m] > best[0]:
                lo, hi = zs[m], zs[m + 1]
                thr = lo + (hi - lo) / 2.0
                if not (lo <= thr < hi):
                    thr = lo
                best = (float(gain[m]), f, thr, idx[order[: m + 1]])
        return best

    def grow(idx, level):
        k = new_node()
        if level < depth and len(idx) >= 2 * min_leaf:
            gain, f, thr, left_idx = best_split(idx)
            # ignore splits that only shuffle rounding noise
            if f >= 0 and gain > 1e-12 * float(np.sum(y[idx] ** 2)):
                mask = np.zeros(len(y), dtype=bool)
                mask[left_idx] = True
                feature[k], threshold[k] = f, thr
                left[k] = grow(np.sort(left_idx), level + 1)
                right[k] = grow(idx[~mask[idx]], level + 1)
                return k
        value[k] = float(y[idx].mean())
        return k

    grow(np.arange(len(y)), 0)
    return Tree(feature=np.array(feature, dtype=int), threshold=np.array(threshold, dtype=float),
                left=np.array(left, dtype=int), right=np.array(right, dtype=int), value=np.array(value, dtype=float))


@dataclass(eq=False)
class SurrogateModel:
    trees: list
    learning_rate: float
    base: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    meta: dict = field(default_factory=dict)
    train_rmse: list = field(default_factory=list)

    def standardize(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.feature_mean) / self.feature_std

    def to_dict(self) -> dict:
        return {
            "format": "pdnrel-gbt/1", "features": list(FEATURES), "learning_rate": self.learning_rate,
            "base": self.base, "feature_mean": self.feature_mean.tolist(), "feature_std": self.feature_std.tolist(),
            "meta": self.meta, "train_rmse": list(self.train_rmse), "trees": [t.to_record() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        if d.get("format") != "pdnrel-gbt/1":
            raise ValidationError("not a pdnrel surrogate model file")
        return cls(trees=[Tree.from_record(r) for r in d["trees"]], learning_rate=float(d["learning_rate"]),
                   base=float(d["base"]), feature_mean=np.array(d["feature_mean"], dtype=float),
                   feature_std=np.array(d["feature_std"], dtype=float), meta=dict(d.get("meta", {})),
                   train_rmse=list(d.get("train_rmse", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def train(data: Dataset, hyper: Hyper = Hyper()) -> SurrogateModel:
    """Squared-error gradient boosting: each round fits a depth-limited tree to the residuals."""
    if len(data) == 0:
        raise ValidationError("cannot train on an empty dataset")
    if len(data) < 10:
        raise ValidationError(f"need at least 10 rows to train, got {len(data)}")
    X = np.asarray(data.features, dtype=float)
    y = np.asarray(data.target, dtype=float)
    if X.shape[1] != N_FEATURES or not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValidationError("training data must be finite with 4 feature columns")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std
    base = float(y.mean())
    pred = np.full(len(y), base)
    rng = np.random.default_rng(hyper.seed)
    n_sub = max(1, int(round(hyper.subsample * len(y))))
    trees, history = [], [float(np.sqrt(np.mean((y - pred) ** 2)))]
    for _ in range(hyper.rounds):
        resid = y - pred
        if n_sub < len(y):
            rows = np.sort(rng.choice(len(y), size=n_sub, replace=False))
            tree = _fit_tree(Z[rows], resid[rows], hyper.depth, hyper.min_leaf)
        else:
            tree = _fit_tree(Z, resid, hyper.depth, hyper.min_leaf)
        trees.append(tree)
        pred = pred + hyper.learning_rate * tree.apply(Z)
        history.append(float(np.sqrt(np.mean((y - pred) ** 2))))
    return SurrogateModel(trees=trees, learning_rate=hyper.learning_rate, base=base, feature_mean=mean,
                          feature_std=std, meta={**asdict(hyper), "n_rows": len(y)}, train_rmse=history)


def predict(model: SurrogateModel, features):
    """Stress estimate (Pa): ``base + learning_rate * sum(tree outputs)``.

    A single feature row returns a float; a 2-D array returns an array.
    """
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X2 = X.reshape(1, -1) if single else X
    if X2.ndim != 2 or X2.shape[1] != N_FEATURES:
        raise ValidationError(f"expected {N_FEATURES} features per row, got shape {X.shape}")
    if not np.all(np.isfinite(X2)):
        raise ValidationError("features must be finite")
    Z = model.standardize(X2)
    if single:
        return _predict_row(model, Z[0].tolist())
    pred = np.full(len(Z), model.base)
    for tree in model.trees:
        pred = pred + model.learning_rate * tree.apply(Z)
    return pred


def _predict_row(model, z) -> float:
    # plain-Python walk; far cheaper than numpy dispatch for one row
    flat = getattr(model, "_flat", None)
    if flat is None:
        flat = [(t.feature.tolist(), t.threshold.tolist(), t.left.tolist(), t.right.tolist(), t.value.tolist())
                for t in model.trees]
        model._flat = flat
    pred = model.base
    lr = model.learning_rate
    for feat, thr, lft, rgt, val in flat:
        k = 0
        while feat[k] >= 0:
            k = lft[k] if z[feat[k]] <= thr[k] else rgt[k]
        pred = pred + lr * val[k]
    return pred


def evaluate(model: SurrogateModel, data: Dataset) -> dict:
    """RMSE, R^2 = 1 - SS_res/SS_tot and max |error|. R^2 is None when targets have no variance."""
    if len(data) == 0:
        raise ValidationError("held-out set is empty")
    y = data.target
    err = predict(model, data.features) - y
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return {
        "rmse": math.sqrt(ss_res / len(y)),
        "r2": None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot,
        "max_abs_error": float(np.max(np.abs(err))),
        "n": len(y),
    }


def pdn_features(j, T, tech: TechParams = TechParams(), x_norm: float = 0.0) -> np.ndarray:
    """Feature rows for segments with current density ``j`` and temperature ``T``.

    ``x_norm = 0`` queries the cathode, where the peak stress sits.
    """
    j = np.abs(np.asarray(j, dtype=float))
    T = np.broadcast_to(np.asarray(T, dtype=float), j.shape)
    return np.column_stack([j, diffusivity(T, tech), np.full(j.shape, float(x_norm)), T])


def hotspot_screen(segment_ids, features, model: SurrogateModel, top_k: int | None = None) -> list:
    """Segments ranked by predicted peak stress, descending; ties by segment id.

    Returns ``[(segment_id, predicted_sigma), ...]`` of at most ``top_k`` entries.
    """
    ids = np.asarray(segment_ids)
    feats = np.asarray(features, dtype=float).reshape(len(ids), N_FEATURES)
    pred = predict(model, feats) if len(ids) else np.zeros(0)
    order = np.lexsort((ids, -pred))
    if top_k is not None:
        order = order[:top_k]
    return [(int(ids[k]), float(pred[k])) for k in order]

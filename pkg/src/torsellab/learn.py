"""Circuit-performance learning: feature encoding, threshold labeling, and
from-scratch classifiers (Random Forest, distance-weighted k-NN).

The forest is the workhorse: it serves both as the fast/slow circuit
predicate used during path selection and as the multiclass adversary model
in the leakage game. Training is histogram-based and level-parallel in
numpy, which keeps full experiment sweeps in the minutes range without any
ML dependency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, ParseError, ValidationError
from .netmodel import Relay, Endpoint

N_BINS = 256

FEATURE_NAMES_9 = ("g_asn", "g_cc", "g_bw", "m_asn", "m_cc", "m_bw", "e_asn", "e_cc", "e_bw")
FEATURE_NAMES_11 = FEATURE_NAMES_9 + ("d_asn", "d_cc")


def encode_country(cc: str) -> int:
    """Two-letter country code -> decimal concatenation of its ASCII codes.

    'US' -> 8583 ('U' is 85, 'S' is 83). Rejects anything but two uppercase
    letters so encodings stay in [6565, 9090].
    """
    if len(cc) != 2 or not cc.isascii() or not cc.isupper() or not cc.isalpha():
        raise ValidationError(f"bad country code {cc!r}")
    return ord(cc[0]) * 100 + ord(cc[1])


def extract_features(
    circuit,
    relays: dict[int, Relay],
    destination: Endpoint | None = None,
) -> np.ndarray:
    """Flatten a circuit into its (asn, country, bandwidth) triples.

    Field order is guard, middle, exit, then optionally the destination's
    (asn, country) pair, giving 9 or 11 values.
    """
    vals: list[float] = []
    for rid in (circuit.guard, circuit.middle, circuit.exit):
        try:
            r = relays[rid]
        except KeyError:
            raise ValidationError(f"unknown relay id {rid}") from None
        vals.extend((float(r.asn), float(encode_country(r.country)), float(r.bandwidth)))
    if destination is not None:
        vals.extend((float(destination.asn), float(encode_country(destination.country))))
    return np.array(vals, dtype=np.float64)


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    ttlb_s: float
    label: bool


def label_samples(records, tau: float, relays: dict[int, Relay]) -> list[LabeledSample]:
    """Label each stream record fast (True) iff its TTLB is strictly below tau."""
    if tau <= 0 and tau != float("inf"):
        if tau < 0:
            raise ValidationError("tau must be positive")
    out = []
    for rec in records:
        fv = extract_features(rec.circuit, relays)
        out.append(LabeledSample(features=fv, ttlb_s=rec.ttlb_s, label=rec.ttlb_s < tau))
    return out


def samples_to_arrays(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.features for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# Random forest


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 5
    mtry: int = 3
    max_samples: int | None = None  # bootstrap size cap; None = full n


@dataclass
class Tree:
    """Array-encoded binary decision tree with axis-aligned splits.

    feature[i] < 0 marks node i as a leaf; otherwise samples with
    x[feature[i]] <= threshold[i] descend to left[i], the rest to right[i].
    counts holds per-class training counts at every node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    def predict_class(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            live = feat >= 0
            if not live.any():
                break
            go_left = np.zeros(X.shape[0], dtype=bool)
            lv = np.where(live)[0]
            go_left[lv] = X[lv, feat[lv]] <= self.threshold[node[lv]]
            node = np.where(live, np.where(go_left, self.left[node], self.right[node]), node)
        leaf_counts = self.counts[node]
        return np.argmax(leaf_counts, axis=1)


@dataclass
class ForestModel:
    trees: list[Tree]
    params: ForestParams
    seed: int
    classes: np.ndarray  # original class labels, sorted
    task: str  # "binary" or "multiclass"
    tau: float | None = None
    n_features: int = 9

    def vote_matrix(self, X: np.ndarray) -> np.ndarray:
        """(n_samples, n_classes) count of trees voting for each class."""
        votes = np.zeros((X.shape[0], len(self.classes)), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            votes[rows, tree.predict_class(X)] += 1
        return votes

    def predict_many(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized prediction: (class labels, winning vote share)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValidationError(
                f"feature arity {X.shape[-1] if X.ndim else '?'} != model arity {self.n_features}"
            )
        votes = self.vote_matrix(X)
        idx = np.argmax(votes, axis=1)
        share = votes[np.arange(X.shape[0]), idx] / len(self.trees)
        return self.classes[idx], share


def _bin_features(X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Quantile-bin each feature; returns uint8-ish bins plus boundary values."""
    n, d = X.shape
    edges: list[np.ndarray] = []
    binned = np.empty((n, d), dtype=np.int16)
    qs = np.linspace(0.0, 1.0, N_BINS + 1)[1:-1]
    for f in range(d):
        col = X[:, f]
        e = np.unique(np.quantile(col, qs))
        # Drop the top value as a boundary: splits must leave both sides nonempty.
        e = e[e < col.max()] if e.size else e
        edges.append(e)
        binned[:, f] = np.searchsorted(e, col, side="right")
    return binned, edges


def _grow_tree(
    binned: np.ndarray,
    edges: list[np.ndarray],
    y: np.ndarray,
    n_classes: int,
    params: ForestParams,
    rng: np.random.Generator,
) -> Tree:
    n, d = binned.shape
    n_boot = n if params.max_samples is None else min(n, params.max_samples)
    idx = rng.integers(0, n, size=n_boot)  # bootstrap
    mtry = min(params.mtry, d)
    max_bins = max((e.size for e in edges), default=0) + 1

    feature = [np.int64(-1)]
    threshold = [0.0]
    left = [np.int64(-1)]
    right = [np.int64(-1)]
    counts: list[np.ndarray] = [np.bincount(y[idx], minlength=n_classes)]

    node_of = np.zeros(n_boot, dtype=np.int64)  # per bootstrap-sample node id
    open_nodes = [0]
    sb = binned[idx]
    sy = y[idx]

    for _depth in range(params.max_depth):
        if not open_nodes:
            break
        open_arr = np.array(open_nodes, dtype=np.int64)
        remap = -np.ones(len(feature), dtype=np.int64)
        remap[open_arr] = np.arange(len(open_arr))
        slot = remap[node_of]  # -1 for samples already in leaves
        live = slot >= 0
        ls, lb, ly = slot[live], sb[live], sy[live]

        # Histogram over (open node, feature, bin, class) via one fused bincount.
        # Chunk the open-node axis so the scratch array stays bounded.
        cell = d * max_bins * n_classes
        hist = np.empty((len(open_arr), d, max_bins, n_classes), dtype=np.int64)
        chunk = max(1, min(len(open_arr), 32_000_000 // max(cell, 1)))
        feat_off = np.arange(d)[None, :]
        for start in range(0, len(open_arr), chunk):
            stop = min(start + chunk, len(open_arr))
            sel = (ls >= start) & (ls < stop)
            fused = (((ls[sel, None] - start) * d + feat_off) * max_bins + lb[sel]) * n_classes + ly[
                sel, None
            ]
            hist[start:stop] = np.bincount(
                fused.ravel(), minlength=(stop - start) * cell
            ).reshape(stop - start, d, max_bins, n_classes)

        node_tot = hist[:, 0].sum(axis=1)  # (n_open, n_classes)
        node_n = node_tot.sum(axis=1)
        parent_score = node_n - (node_tot.astype(np.float64) ** 2).sum(axis=1) / np.maximum(node_n, 1)

        cum = np.cumsum(hist, axis=2, dtype=np.float64)  # left counts per threshold bin
        left_n = cum.sum(axis=3)
        tot_n = node_n[:, None, None]
        right_n = tot_n - left_n
        with np.errstate(divide="ignore", invalid="ignore"):
            gini_l = left_n - (cum**2).sum(axis=3) / left_n
            gini_r = right_n - ((node_tot[:, None, None, :] - cum) ** 2).sum(axis=3) / right_n
        score = np.where(
            (left_n >= params.min_leaf) & (right_n >= params.min_leaf),
            np.nan_to_num(gini_l, nan=np.inf) + np.nan_to_num(gini_r, nan=np.inf),
            np.inf,
        )

        # Restrict each node to its own random feature subset.
        allowed = np.argsort(rng.random((len(open_arr), d)), axis=1)[:, :mtry]
        mask = np.ones((len(open_arr), d), dtype=bool)
        np.put_along_axis(mask, allowed, False, axis=1)
        score[mask] = np.inf

        flat = score.reshape(len(open_arr), -1)
        best = np.argmin(flat, axis=1)
        best_score = flat[np.arange(len(open_arr)), best]
        best_f, best_b = np.divmod(best, max_bins)

        splittable = best_score < parent_score - 1e-9

        next_open: list[int] = []
        split_nodes = []
        for i, node_id in enumerate(open_arr):
            if not splittable[i]:
                continue
            f, b = int(best_f[i]), int(best_b[i])
            feature[node_id] = np.int64(f)
            threshold[node_id] = float(edges[f][b])
            lid, rid = len(feature), len(feature) + 1
            left[node_id], right[node_id] = np.int64(lid), np.int64(rid)
            lc = hist[i, f, : b + 1].sum(axis=0)
            for cid, c in ((lid, lc), (rid, counts[node_id] - lc)):
                feature.append(np.int64(-1))
                threshold.append(0.0)
                left.append(np.int64(-1))
                right.append(np.int64(-1))
                counts.append(c)
                if c.sum() >= 2 * params.min_leaf and (c > 0).sum() > 1:
                    next_open.append(cid)
            split_nodes.append((int(node_id), f, b, lid, rid))

        if split_nodes:
            snode = np.array([s[0] for s in split_nodes])
            sfeat = np.array([s[1] for s in split_nodes])
            sbin = np.array([s[2] for s in split_nodes])
            slid = np.array([s[3] for s in split_nodes])
            srid = np.array([s[4] for s in split_nodes])
            lookup_f = np.zeros(len(feature), dtype=np.int64)
            lookup_b = np.zeros(len(feature), dtype=np.int64)
            lookup_l = np.zeros(len(feature), dtype=np.int64)
            lookup_r = np.zeros(len(feature), dtype=np.int64)
            is_split = np.zeros(len(feature), dtype=bool)
            lookup_f[snode], lookup_b[snode] = sfeat, sbin
            lookup_l[snode], lookup_r[snode] = slid, srid
            is_split[snode] = True
            moving = is_split[node_of]
            mv = np.where(moving)[0]
            goes_left = sb[mv, lookup_f[node_of[mv]]] <= lookup_b[node_of[mv]]
            node_of[mv] = np.where(goes_left, lookup_l[node_of[mv]], lookup_r[node_of[mv]])
        open_nodes = next_open

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        counts=np.stack(counts).astype(np.int64),
    )


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    task: str = "binary",
    tau: float | None = None,
) -> ForestModel:
    """Fit a bagged ensemble of Gini-split trees; deterministic for a seed.

    Each tree gets its own bootstrap sample and an rng derived as
    seed + tree_index, so results do not depend on training order.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2:
        raise ValidationError("X must be 2-D")
    if X.shape[0] < 10:
        raise DegenerateDataError("need at least 10 samples")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateDataError("training data has a single class")
    y_idx = np.searchsorted(classes, y)
    binned, edges = _bin_features(X)
    trees = [
        _grow_tree(binned, edges, y_idx, classes.size, params, np.random.default_rng(seed + t))
        for t in range(params.n_trees)
    ]
    return ForestModel(
        trees=trees,
        params=params,
        seed=seed,
        classes=classes,
        task=task,
        tau=tau,
        n_features=X.shape[1],
    )


def predict_forest(model: ForestModel, fv: np.ndarray) -> tuple[bool | int, float]:
    """Classify one feature vector.

    Binary task: returns (is_fast, positive-vote share) with the label True
    when the share reaches 0.5. Multiclass: (winning class, vote share).
    """
    fv = np.asarray(fv, dtype=np.float64)
    if fv.shape != (model.n_features,):
        raise ValidationError(f"feature arity {fv.shape} != model arity {model.n_features}")
    votes = model.vote_matrix(fv[None, :])[0]
    if model.task == "binary":
        pos = int(np.searchsorted(model.classes, 1))
        score = votes[pos] / len(model.trees) if (model.classes == 1).any() else 0.0
        return bool(score >= 0.5), float(score)
    idx = int(np.argmax(votes))
    return int(model.classes[idx]), float(votes[idx] / len(model.trees))


# ---------------------------------------------------------------------------
# k-NN


def knn_predict(
    train_X: np.ndarray, train_y: np.ndarray, fv: np.ndarray, k: int = 9
) -> int:
    """Distance-weighted k-NN on z-scored features; weight is 1/d^2.

    A zero-distance training point decides immediately. Standardization uses
    the training set's own moments, so duplicated training sets change
    nothing but the (cancelling) weight scale.
    """
    if k <= 0:
        raise ValidationError("k must be positive")
    train_X = np.asarray(train_X, dtype=np.float64)
    train_y = np.asarray(train_y)
    if train_X.shape[0] == 0:
        raise DegenerateDataError("empty training set")
    if k > train_X.shape[0]:
        raise ValidationError("k exceeds training set size")
    mu = train_X.mean(axis=0)
    sd = train_X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (train_X - mu) / sd
    z = (np.asarray(fv, dtype=np.float64) - mu) / sd
    d2 = ((Z - z) ** 2).sum(axis=1)
    exact = d2 <= 1e-24
    if exact.any():
        return train_y[np.argmax(exact)]
    order = np.argsort(d2, kind="stable")[:k]
    weights = 1.0 / d2[order]
    tally: dict = {}
    for yi, w in zip(train_y[order], weights):
        tally[yi] = tally.get(yi, 0.0) + w
    return max(sorted(tally), key=lambda c: tally[c])


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    fpr: float
    fnr: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def size(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def evaluate(model: ForestModel, X: np.ndarray, y: np.ndarray) -> EvalReport:
    """Confusion-matrix report for a binary model on a held-out set."""
    if len(y) == 0:
        raise DegenerateDataError("empty test set")
    pred, _ = model.predict_many(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).astype(bool)
    pred = pred.astype(bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    fnr = fn / (fn + tp) if (fn + tp) else 0.0
    return EvalReport(
        accuracy=(tp + tn) / len(y), fpr=fpr, fnr=fnr, tp=tp, fp=fp, tn=tn, fn=fn
    )


def sweep_tau(
    train_X: np.ndarray,
    train_ttlb: np.ndarray,
    test_X: np.ndarray,
    test_ttlb: np.ndarray,
    taus,
    params: ForestParams = ForestParams(),
    seed: int = 0,
) -> list[tuple[float, EvalReport]]:
    """Relabel both sets at each threshold, retrain, and evaluate.

    Thresholds where either set collapses to one class are reported with a
    degenerate constant-classifier confusion (accuracy of the majority).
    """
    out = []
    for tau in taus:
        ytr = (np.asarray(train_ttlb) < tau).astype(np.int64)
        yte = (np.asarray(test_ttlb) < tau).astype(np.int64)
        if len(np.unique(ytr)) < 2:
            const = int(ytr[0]) if len(ytr) else 0
            pred = np.full(len(yte), const, dtype=bool)
            ybool = yte.astype(bool)
            tp = int(np.sum(pred & ybool))
            fp = int(np.sum(pred & ~ybool))
            tn = int(np.sum(~pred & ~ybool))
            fn = int(np.sum(~pred & ybool))
            rep = EvalReport(
                accuracy=(tp + tn) / max(len(yte), 1),
                fpr=fp / (fp + tn) if (fp + tn) else 0.0,
                fnr=fn / (fn + tp) if (fn + tp) else 0.0,
                tp=tp, fp=fp, tn=tn, fn=fn,
            )
        else:
            model = train_forest(train_X, ytr, params=params, seed=seed, task="binary", tau=tau)
            rep = evaluate(model, test_X, yte)
        out.append((float(tau), rep))
    return out


# ---------------------------------------------------------------------------
# Model persistence

MODEL_FORMAT = "torsellab-forest/1"


def save_model(model: ForestModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "task": model.task,
        "tau": model.tau,
        "seed": model.seed,
        "n_features": model.n_features,
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "min_leaf": model.params.min_leaf,
            "mtry": model.params.mtry,
        },
        "classes": [int(c) for c in model.classes],
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "counts": t.counts.tolist(),
            }
            for t in model.trees
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_model(path) -> ForestModel:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"{path}: unsupported model format {doc.get('format')!r}")
    trees = [
        Tree(
            feature=np.array(t["feature"], dtype=np.int64),
            threshold=np.array(t["threshold"], dtype=np.float64),
            left=np.array(t["left"], dtype=np.int64),
            right=np.array(t["right"], dtype=np.int64),
            counts=np.array(t["counts"], dtype=np.int64),
        )
        for t in doc["trees"]
    ]
    p = doc["params"]
    return ForestModel(
        trees=trees,
        params=ForestParams(
            n_trees=p["n_trees"], max_depth=p["max_depth"], min_leaf=p["min_leaf"], mtry=p["mtry"]
        ),
        seed=doc["seed"],
        classes=np.array(doc["classes"], dtype=np.int64),
        task=doc["task"],
        tau=doc["tau"],
        n_features=doc["n_features"],
    )

"""k-NN and probe evaluation, attribute-count distribution, annotation sweeps
and embedding export.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (ATTRIBUTES, EXCLUDED, AnnotationMask, DatasetSplit, NoduleDataset,
                   mask_annotations)
from .model import extract_feature
from .predict import ProbeTrainConfig, predict_labels, train_stage2

REPORT_SCHEMA_VERSION = 1
# Attributes excluded from reported results (heavily imbalanced classes).
UNREPORTED = ("internalStructure",)
REPORTED = tuple(a for a in ATTRIBUTES if a not in UNREPORTED)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# k-NN


@dataclass
class KnnIndex:
    train_features: np.ndarray   # [Nt, D]
    train_labels: dict           # task -> [Nt] int labels
    k: int
    normalize: bool = True
    weighted: bool = True
    train_ids: np.ndarray | None = None

    def __post_init__(self):
        self.train_features = np.asarray(self.train_features, dtype=np.float64)
        if self.normalize and len(self.train_features):
            self.train_features = _l2(self.train_features)
        if self.k < 1:
            raise EvaluationError("k must be >= 1")


def _l2(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def knn_classify(index: KnnIndex, queries, task: str, query_ids=None, k: int | None = None) -> np.ndarray:
    """Label each query by a vote among its top-k train rows by dot product.

    Votes are weighted by the similarity floored at 0 (plain counts when
    ``index.weighted`` is False, or when every weight is 0). Train rows whose
    id equals the query id are skipped, as are rows labelled ``-1`` for the
    task. Ties among neighbours go to the lower train index and ties in the
    vote to the smaller class.
    """
    if len(index.train_features) == 0:
        raise EvaluationError("empty k-NN index")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None]
    if q.shape[1] != index.train_features.shape[1]:
        raise EvaluationError(f"query dim {q.shape[1]} != index dim {index.train_features.shape[1]}")
    if index.normalize:
        q = _l2(q)
    labels = np.asarray(index.train_labels[task])
    k = k or index.k
    sims = q @ index.train_features.T
    usable = np.broadcast_to(labels != EXCLUDED, sims.shape).copy()
    if query_ids is not None:
        if index.train_ids is None:
            raise EvaluationError("query_ids given but the index has no train_ids")
        usable &= np.asarray(index.train_ids)[None, :] != np.asarray(query_ids)[:, None]
    classes = np.unique(labels[labels != EXCLUDED])
    out = np.empty(len(q), dtype=np.int64)
    for r in range(len(q)):
        cand = np.flatnonzero(usable[r])
        if len(cand) == 0:
            raise EvaluationError("no usable neighbours for a query")
        order = cand[np.argsort(-sims[r, cand], kind="stable")][:k]
        votes = np.zeros(len(classes))
        cls_idx = np.searchsorted(classes, labels[order])
        if index.weighted:
            np.add.at(votes, cls_idx, np.maximum(sims[r, order], 0.0))
        if not index.weighted or not votes.any():
            votes = np.bincount(cls_idx, minlength=len(classes)).astype(np.float64)
        out[r] = classes[int(np.argmax(votes))]
    return out


# ---------------------------------------------------------------------------
# metrics


def within_one_accuracy(pred, true) -> float:
    """Percentage of ordinal predictions within one level of the target."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise EvaluationError("pred and true differ in shape")
    if pred.size == 0:
        return float("nan")
    return float(np.mean(np.abs(pred - true) <= 1) * 100)


def accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise EvaluationError("pred and true differ in shape")
    if pred.size == 0:
        return float("nan")
    return float(np.mean(pred == true) * 100)


def attribute_count_distribution(accuracies: Sequence[float]) -> np.ndarray:
    """Distribution of the number of correct attributes, attributes independent.

    ``accuracies`` are per-attribute probabilities in [0, 1]; entry ``j`` of the
    result is P(exactly j correct).
    """
    p = np.asarray(accuracies, dtype=np.float64)
    if ((p < 0) | (p > 1)).any():
        raise EvaluationError("accuracies must lie in [0, 1]")
    dist = np.zeros(len(p) + 1)
    dist[0] = 1.0
    for pi in p:
        dist[1:] = dist[1:] * (1 - pi) + dist[:-1] * pi
        dist[0] *= 1 - pi
    return dist


def class_distance_ratio(features, labels) -> float:
    """Mean Euclidean distance between rows of different classes over the
    mean distance between distinct rows of the same class."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    sq = (x * x).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    other = labels[:, None] != labels[None, :]
    if not same.any() or not other.any():
        raise EvaluationError("need two classes with at least two rows in one of them")
    return float(d[other].mean() / d[same].mean())


def count_distribution_from_report(attribute_accuracy: dict) -> np.ndarray:
    """Count distribution over all eight attributes; unreported ones count as always correct."""
    return attribute_count_distribution(
        [attribute_accuracy[a] / 100 if a in attribute_accuracy else 1.0 for a in ATTRIBUTES])


@dataclass
class MetricsReport:
    mode: str
    attribute_accuracy: dict          # reported attributes, percent
    excluded_attribute_accuracy: dict  # computed but not reported, percent
    malignancy_accuracy: float
    count_distribution: list
    annotation_fraction: float = 1.0
    k: int | None = None
    n_test_images: int = 0
    per_nodule_malignancy_accuracy: float | None = None
    fingerprint: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        for v in [*self.attribute_accuracy.values(), self.malignancy_accuracy]:
            if not (np.isnan(v) or 0 <= v <= 100):
                raise EvaluationError(f"accuracy {v} outside [0, 100]")
        if abs(sum(self.count_distribution) - 1) > 1e-9:
            raise EvaluationError("count distribution does not sum to 1")

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "MetricsReport":
        obj = json.loads(Path(path).read_text())
        if obj.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvaluationError(f"{path}: unsupported schema_version {obj.get('schema_version')}")
        return cls(**obj)


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# evaluation


def check_no_leakage(split: DatasetSplit):
    shared = set(split.train_nodule_ids) & set(split.test_nodule_ids)
    if shared:
        raise EvaluationError(f"split leaks {len(shared)} nodules into both partitions")


def _per_nodule(ids, correct):
    by = {}
    for i, c in zip(ids, correct):
        by.setdefault(i, []).append(c)
    return float(np.mean([np.mean(v) for v in by.values()]) * 100) if by else float("nan")


def evaluate(encoder, dataset: NoduleDataset, split: DatasetSplit, mode: str = "knn", k: int | None = None,
             probe=None, mask: AnnotationMask | None = None, source: str | None = None,
             weighted: bool = True, config_fingerprint: str = "") -> MetricsReport:
    """Score test images of ``split`` with k-NN over train features or with trained probes.

    In k-NN mode only annotated train images (``mask``) vote. Accuracies are
    per test image; attributes use within-one scoring.
    """
    check_no_leakage(split)
    if mode == "knn":
        if k is None:
            raise EvaluationError("knn mode needs k")
        source = source or "final_token"
    elif mode == "trained":
        if probe is None:
            raise EvaluationError("trained mode needs probes")
        source = probe.feature_source
    else:
        raise EvaluationError(f"unknown mode {mode!r}")
    test = dataset.subset(split.test_nodule_ids)
    if len(test) == 0:
        raise EvaluationError("no test images")
    f_test = extract_feature(encoder, test.patches, source).values

    if mode == "knn":
        train = dataset.subset(mask.annotated_ids if mask is not None else split.train_nodule_ids)
        f_train = extract_feature(encoder, train.patches, source).values
        labels = {a: train.attributes[:, j] for j, a in enumerate(ATTRIBUTES)}
        labels["malignancy"] = train.malignancy
        index = KnnIndex(f_train, labels, k=min(k, len(train)), weighted=weighted)
        attr_pred = np.stack([knn_classify(index, f_test, a) for a in ATTRIBUTES], axis=1)
        mal_pred = knn_classify(index, f_test, "malignancy")
    else:
        attr_pred, mal_pred = predict_labels(probe, f_test)

    acc = {a: within_one_accuracy(attr_pred[:, j], test.attributes[:, j]) for j, a in enumerate(ATTRIBUTES)}
    valid = test.malignancy != EXCLUDED
    mal_acc = accuracy(mal_pred[valid], test.malignancy[valid])
    reported = {a: acc[a] for a in REPORTED}
    return MetricsReport(
        mode=mode,
        attribute_accuracy=reported,
        excluded_attribute_accuracy={a: acc[a] for a in UNREPORTED},
        malignancy_accuracy=mal_acc,
        count_distribution=count_distribution_from_report(reported).tolist(),
        annotation_fraction=mask.fraction if mask is not None else 1.0,
        k=k if mode == "knn" else None,
        n_test_images=len(test),
        per_nodule_malignancy_accuracy=_per_nodule(test.nodule_ids[valid], mal_pred[valid] == test.malignancy[valid]),
        fingerprint=config_fingerprint,
    )


SWEEP_COLUMNS = ("fraction", "seed", "strategy", "task", "accuracy")


def annotation_sweep(encoder, dataset: NoduleDataset, split: DatasetSplit, fractions: Sequence[float],
                     seeds: Sequence[int], probe_cfg: ProbeTrainConfig | None = None,
                     baseline: Callable | None = None, tasks: Sequence[str] = ("malignancy",)) -> list:
    """Train and score stage 2 for every (fraction, seed) on nested masks.

    ``baseline(dataset, mask, seed) -> (frozen encoder, probe)`` adds rows with
    strategy "baseline" trained on the same masks. Returns row dicts with keys
    ``SWEEP_COLUMNS``.
    """
    for f in fractions:
        if not 0 < f <= 1:
            raise EvaluationError(f"fraction {f} not in (0, 1]")
    rows = []
    for seed in seeds:
        for fraction in fractions:
            mask = mask_annotations(split, fraction, seed)
            probe, _ = train_stage2(encoder, dataset, mask, probe_cfg, seed=seed)
            strategies = [("two-stage", encoder, probe)]
            if baseline is not None:
                strategies.append(("baseline", *baseline(dataset, mask, seed)))
            for name, enc, pr in strategies:
                report = evaluate(enc, dataset, split, "trained", probe=pr, mask=mask)
                for task in tasks:
                    value = (report.malignancy_accuracy if task == "malignancy" else
                             report.attribute_accuracy.get(task, report.excluded_attribute_accuracy.get(task)))
                    rows.append({"fraction": fraction, "seed": seed, "strategy": name,
                                 "task": task, "accuracy": value})
    return rows


def write_sweep_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in SWEEP_COLUMNS})
    return path


def read_sweep_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{"fraction": float(r["fraction"]), "seed": int(r["seed"]), "strategy": r["strategy"],
                 "task": r["task"], "accuracy": float(r["accuracy"])} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingTable:
    nodule_ids: np.ndarray
    reader_ids: np.ndarray
    features: np.ndarray
    attributes: np.ndarray
    malignancy: np.ndarray
    projection: np.ndarray | None = None
    columns: list = field(default_factory=list)


def tsne_2d(features: np.ndarray, seed: int = 0) -> np.ndarray:
    """2-D t-SNE projection (delegated to scikit-learn); NaN for fewer than 5 rows."""
    if len(features) < 5:
        return np.full((len(features), 2), np.nan)
    from sklearn.manifold import TSNE

    perplexity = float(min(30.0, (len(features) - 1) / 3))
    return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(
        np.asarray(features, dtype=np.float64))


def export_embeddings(encoder, dataset: NoduleDataset, split: DatasetSplit, path=None,
                      source: str = "final_token", project: bool = True, seed: int = 0) -> EmbeddingTable:
    """Features and ground-truth labels of every test image, optionally with a
    2-D t-SNE projection; written as tab-separated values with a header."""
    check_no_leakage(split)
    test = dataset.subset(split.test_nodule_ids)
    feats = extract_feature(encoder, test.patches, source).values
    proj = tsne_2d(feats, seed) if project else None
    columns = (["nodule_id", "reader_id"] + [f"f{i}" for i in range(feats.shape[1])]
               + list(ATTRIBUTES) + ["malignancy"] + (["tsne_x", "tsne_y"] if proj is not None else []))
    table = EmbeddingTable(test.nodule_ids, test.reader_ids, feats, test.attributes, test.malignancy, proj, columns)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t")
            w.writerow(columns)
            for i in range(len(test)):
                row = [test.nodule_ids[i], test.reader_ids[i], *(repr(float(v)) for v in feats[i]),
                       *test.attributes[i].tolist(), int(test.malignancy[i])]
                if proj is not None:
                    row += [repr(float(v)) for v in proj[i]]
                w.writerow(row)
    return table


def read_embeddings(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    header, body = rows[0], rows[1:]
    return {"columns": header, "rows": body}

"""Nodule preprocessing, splits, annotation masks and the synthetic corpus.

Reader annotations are filtered by slice thickness, volumes are resampled to
1 mm isotropic voxels, reader scores are aggregated by median and a 32x32
axial patch is cut around every annotation centroid.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PATCH_SIZE = 32

# Canonical order; predictors and concatenations rely on it.
ATTRIBUTES = (
    "subtlety",
    "internalStructure",
    "calcification",
    "sphericity",
    "margin",
    "lobulation",
    "spiculation",
    "texture",
)
# LIDC rating scales (inclusive).
ATTRIBUTE_RANGES = {
    "subtlety": (1, 5),
    "internalStructure": (1, 4),
    "calcification": (1, 6),
    "sphericity": (1, 5),
    "margin": (1, 5),
    "lobulation": (1, 5),
    "spiculation": (1, 5),
    "texture": (1, 5),
}
MALIGNANCY_RANGE = (1, 5)
CLASS_COUNTS = tuple(hi - lo + 1 for lo, hi in ATTRIBUTE_RANGES.values())

BENIGN, MALIGNANT, EXCLUDED = 0, 1, -1


class DataError(ValueError):
    pass


@dataclass
class RawNoduleAnnotation:
    nodule_id: str
    reader_id: str
    attribute_scores: dict
    malignancy_score: int
    slice_thickness_mm: float | None
    centroid: tuple = (0, 0, 0)
    scan_id: str = ""

    def __post_init__(self):
        if set(self.attribute_scores) != set(ATTRIBUTES):
            raise DataError(
                f"{self.nodule_id}/{self.reader_id}: attribute names "
                f"{sorted(self.attribute_scores)} do not match {sorted(ATTRIBUTES)}"
            )
        for name, score in self.attribute_scores.items():
            lo, hi = ATTRIBUTE_RANGES[name]
            if not lo <= int(score) <= hi:
                raise DataError(f"{name}={score} outside [{lo}, {hi}]")
        lo, hi = MALIGNANCY_RANGE
        if not lo <= int(self.malignancy_score) <= hi:
            raise DataError(f"malignancy={self.malignancy_score} outside [{lo}, {hi}]")


@dataclass
class AggregatedNodule:
    nodule_id: str
    patch: np.ndarray
    attribute_labels: dict
    malignancy_label: int  # BENIGN, MALIGNANT or EXCLUDED
    reader_count: int

    def __post_init__(self):
        if self.reader_count < 3:
            raise DataError(f"{self.nodule_id}: reader_count {self.reader_count} < 3")
        if self.patch is not None and self.patch.shape != (PATCH_SIZE, PATCH_SIZE):
            raise DataError(f"{self.nodule_id}: patch shape {self.patch.shape}")


@dataclass
class DatasetSplit:
    train_nodule_ids: frozenset
    test_nodule_ids: frozenset
    seed: int
    stratified: bool = False

    def __post_init__(self):
        shared = self.train_nodule_ids & self.test_nodule_ids
        if shared:
            raise DataError(f"nodule ids in both partitions: {sorted(shared)[:5]}")

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "stratified": self.stratified,
            "train": sorted(self.train_nodule_ids),
            "test": sorted(self.test_nodule_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetSplit":
        _check_version(obj)
        return cls(frozenset(obj["train"]), frozenset(obj["test"]), int(obj["seed"]),
                   bool(obj.get("stratified", False)))


@dataclass
class AnnotationMask:
    fraction: float
    annotated_ids: frozenset
    seed: int

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "fraction": self.fraction,
            "seed": self.seed,
            "annotated": sorted(self.annotated_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationMask":
        _check_version(obj)
        return cls(float(obj["fraction"]), frozenset(obj["annotated"]), int(obj["seed"]))


def _check_version(obj: dict) -> None:
    if obj.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {obj.get('format_version')!r}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# preprocessing rules


def filter_scans(records: Iterable, max_thickness_mm: float = 2.5) -> list:
    """Keep records whose slice thickness is at most ``max_thickness_mm``.

    Records without thickness metadata are rejected and logged.
    """
    kept = []
    for rec in records:
        thickness = getattr(rec, "slice_thickness_mm", None)
        if thickness is None or not np.isfinite(thickness):
            logger.warning("rejecting %s/%s: missing slice thickness",
                           getattr(rec, "nodule_id", "?"), getattr(rec, "reader_id", "?"))
            continue
        if thickness <= max_thickness_mm:
            kept.append(rec)
    return kept


def resample_volume(volume: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Linearly resample a (z, y, x) volume to 1 mm isotropic voxels.

    Output voxel ``i`` along an axis sits at physical position ``i`` mm from
    the first input voxel, so the covered extent is ``floor((n - 1) * s) + 1``.
    """
    volume = np.asarray(volume)
    spacing = tuple(float(s) for s in spacing)
    if volume.ndim != 3 or len(spacing) != 3:
        raise DataError("expected a 3D volume and a 3-tuple spacing")
    if min(volume.shape) == 0:
        raise DataError(f"degenerate volume shape {volume.shape}")
    if min(spacing) <= 0:
        raise DataError(f"non-positive spacing {spacing}")
    if spacing == (1.0, 1.0, 1.0):
        return volume.copy()
    out_shape = [int(math.floor((n - 1) * s + 1e-9)) + 1 for n, s in zip(volume.shape, spacing)]
    coords = np.meshgrid(*[np.arange(n) / s for n, s in zip(out_shape, spacing)], indexing="ij")
    out = ndimage.map_coordinates(volume.astype(np.float64), coords, order=1, mode="nearest")
    return out.astype(volume.dtype if np.issubdtype(volume.dtype, np.floating) else np.float64)


def ordinal_median(scores: Sequence[int]) -> int:
    """Median of ordinal scores, halves rounded up to the next ordinal."""
    return round_half_up(float(np.median(scores)))


def binarize_malignancy(scores: Sequence[int], threshold: float = 3) -> int:
    """Median > threshold is malignant, < threshold benign, == threshold excluded."""
    med = float(np.median(scores))
    if med > threshold:
        return MALIGNANT
    if med < threshold:
        return BENIGN
    return EXCLUDED


def aggregate_nodule(annotations: Sequence[RawNoduleAnnotation], patch: np.ndarray | None = None,
                     min_readers: int = 3) -> AggregatedNodule | None:
    """Median-aggregate reader annotations of one nodule.

    Returns None when fewer than ``min_readers`` readers rated the nodule.
    """
    if not annotations:
        raise DataError("aggregate_nodule needs at least one annotation")
    ids = {a.nodule_id for a in annotations}
    if len(ids) != 1:
        raise DataError(f"annotations span several nodules: {sorted(ids)}")
    if len(annotations) < min_readers:
        return None
    labels = {name: ordinal_median([a.attribute_scores[name] for a in annotations])
              for name in ATTRIBUTES}
    malignancy = binarize_malignancy([a.malignancy_score for a in annotations])
    if patch is None:
        patch = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
    return AggregatedNodule(annotations[0].nodule_id, patch, labels, malignancy, len(annotations))


def normalize_intensity(arr: np.ndarray, window: tuple = (-1000.0, 400.0)) -> np.ndarray:
    lo, hi = window
    return ((np.clip(arr, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def extract_patch(volume: np.ndarray, centroid: Sequence[float], size: int = PATCH_SIZE,
                  fill: float = 0.0) -> np.ndarray:
    """Cut a ``size`` x ``size`` axial patch centred on ``centroid``.

    The centroid voxel lands at index ``(size // 2, size // 2)``; regions outside
    the volume are filled with ``fill``.
    """
    volume = np.asarray(volume)
    z, y, x = (int(round(c)) for c in centroid)
    if not (0 <= z < volume.shape[0] and 0 <= y < volume.shape[1] and 0 <= x < volume.shape[2]):
        raise DataError(f"centroid {tuple(centroid)} outside volume of shape {volume.shape}")
    half = size // 2
    patch = np.full((size, size), fill, dtype=np.float32)
    y0, x0 = y - half, x - half
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, volume.shape[1]), min(x0 + size, volume.shape[2])
    patch[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = volume[z, sy0:sy1, sx0:sx1]
    return patch


def split_nodules(nodule_ids: Sequence[str], seed: int, train_fraction: float = 0.7,
                  labels: dict | None = None) -> DatasetSplit:
    """Random nodule-level split; pass ``labels`` (id -> class) to stratify."""
    ids = sorted(set(nodule_ids))
    if len(ids) < 2:
        raise DataError("need at least two nodules to split")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_train = min(max(round_half_up(train_fraction * len(ids)), 1), len(ids) - 1)
        train = order[:n_train]
    else:
        train = []
        for cls in sorted({labels[i] for i in ids}):
            members = [i for i in ids if labels[i] == cls]
            order = [members[j] for j in rng.permutation(len(members))]
            train += order[:round_half_up(train_fraction * len(members))]
    train_set = frozenset(train)
    return DatasetSplit(train_set, frozenset(ids) - train_set, seed, labels is not None)


def mask_annotations(split: DatasetSplit, fraction: float, seed: int) -> AnnotationMask:
    """Annotated subset of the training nodules.

    The subset is a prefix of one fixed permutation per seed, so masks are
    nested: ``mask(f1) <= mask(f2)`` whenever ``f1 <= f2``.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"fraction {fraction} not in (0, 1]")
    ids = sorted(split.train_nodule_ids)
    n = round_half_up(fraction * len(ids))
    if n == 0:
        raise DataError(f"fraction {fraction} of {len(ids)} training nodules leaves no annotations")
    order = np.random.default_rng(seed).permutation(len(ids))
    return AnnotationMask(fraction, frozenset(ids[i] for i in order[:n]), seed)


# ---------------------------------------------------------------------------
# image-level dataset


@dataclass
class NoduleDataset:
    """One row per extracted image (one image per reader annotation)."""

    nodule_ids: np.ndarray          # [N] str
    reader_ids: np.ndarray          # [N] str
    patches: np.ndarray             # [N, 32, 32] float32
    attributes: np.ndarray          # [N, 8] int, aggregated ordinal labels
    malignancy: np.ndarray          # [N] int, BENIGN/MALIGNANT/EXCLUDED
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.nodule_ids)

    def subset(self, nodule_ids: Iterable[str]) -> "NoduleDataset":
        keep = np.isin(self.nodule_ids, list(nodule_ids))
        return NoduleDataset(self.nodule_ids[keep], self.reader_ids[keep], self.patches[keep],
                             self.attributes[keep], self.malignancy[keep], dict(self.meta))

    def unique_nodules(self) -> list:
        return sorted(set(self.nodule_ids.tolist()))

    def nodule_labels(self) -> dict:
        return {n: int(m) for n, m in zip(self.nodule_ids.tolist(), self.malignancy.tolist())}

    @classmethod
    def from_nodules(cls, nodules: Sequence[AggregatedNodule], reader_id: str = "agg") -> "NoduleDataset":
        return cls(
            np.array([n.nodule_id for n in nodules]),
            np.array([reader_id] * len(nodules)),
            np.stack([n.patch for n in nodules]).astype(np.float32),
            np.array([[n.attribute_labels[a] for a in ATTRIBUTES] for n in nodules], dtype=np.int64),
            np.array([n.malignancy_label for n in nodules], dtype=np.int64),
        )


def _patch_name(nodule_id: str, reader_id: str) -> str:
    return f"{nodule_id}_{reader_id}.npy"


def write_dataset(ds: NoduleDataset, root: str | Path, split: DatasetSplit | None = None) -> Path:
    """Write the on-disk layout.

    ``patches/<nodule>_<reader>.npy`` hold little-endian float32 arrays in the
    standard NumPy ``.npy`` container (magic, version, header dict, raw data);
    ``annotations.csv`` has one row per image.
    """
    root = Path(root)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["format_version", "nodule_id", "reader_id", "patch_file", *ATTRIBUTES, "malignancy"])
        for i in range(len(ds)):
            name = _patch_name(ds.nodule_ids[i], ds.reader_ids[i])
            np.save(root / "patches" / name, ds.patches[i].astype("<f4"), allow_pickle=False)
            w.writerow([FORMAT_VERSION, ds.nodule_ids[i], ds.reader_ids[i], f"patches/{name}",
                        *ds.attributes[i].tolist(), int(ds.malignancy[i])])
    meta = {"format_version": FORMAT_VERSION, "n_images": len(ds),
            "attributes": list(ATTRIBUTES), "attribute_ranges": ATTRIBUTE_RANGES, **ds.meta}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2))
    if split is not None:
        (root / "splits.json").write_text(json.dumps(split.to_json(), indent=2))
    return root


def read_dataset(root: str | Path) -> NoduleDataset:
    root = Path(root)
    if not (root / "annotations.csv").exists():
        raise DataError(f"no annotations.csv under {root}")
    meta = {}
    if (root / "dataset.json").exists():
        meta = json.loads((root / "dataset.json").read_text())
        _check_version(meta)
    rows = list(csv.DictReader(open(root / "annotations.csv", newline="")))
    for r in rows:
        if int(r["format_version"]) != FORMAT_VERSION:
            raise DataError(f"unsupported annotations format_version {r['format_version']}")
    patches = [np.load(root / r["patch_file"], allow_pickle=False) for r in rows]
    extra = {k: v for k, v in meta.items()
             if k not in ("format_version", "n_images", "attributes", "attribute_ranges")}
    return NoduleDataset(
        np.array([r["nodule_id"] for r in rows]),
        np.array([r["reader_id"] for r in rows]),
        np.stack(patches).astype(np.float32) if patches else np.zeros((0, PATCH_SIZE, PATCH_SIZE), np.float32),
        np.array([[int(r[a]) for a in ATTRIBUTES] for r in rows], dtype=np.int64).reshape(-1, len(ATTRIBUTES)),
        np.array([int(r["malignancy"]) for r in rows], dtype=np.int64),
        extra,
    )


def read_split(root: str | Path) -> DatasetSplit:
    return DatasetSplit.from_json(json.loads((Path(root) / "splits.json").read_text()))


def write_mask(mask: AnnotationMask, root: str | Path) -> Path:
    path = Path(root) / "masks" / f"{mask.fraction:g}_{mask.seed}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(mask.to_json(), indent=2))
    return path


def read_mask(path: str | Path) -> AnnotationMask:
    return AnnotationMask.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# raw LIDC-style input


RAW_COLUMNS = ("nodule_id", "reader_id", "scan_id", "slice_thickness_mm",
               "centroid_z", "centroid_y", "centroid_x", *ATTRIBUTES, "malignancy")


def read_raw_annotations(path: str | Path) -> list:
    """Parse a reader-annotation CSV (columns ``RAW_COLUMNS``).

    Centroids are voxel indices in the scan's native grid.
    """
    out = []
    for r in csv.DictReader(open(path, newline="")):
        thickness = r.get("slice_thickness_mm", "").strip()
        out.append(RawNoduleAnnotation(
            nodule_id=r["nodule_id"], reader_id=r["reader_id"],
            attribute_scores={a: int(r[a]) for a in ATTRIBUTES},
            malignancy_score=int(r["malignancy"]),
            slice_thickness_mm=float(thickness) if thickness else None,
            centroid=(float(r["centroid_z"]), float(r["centroid_y"]), float(r["centroid_x"])),
            scan_id=r["scan_id"],
        ))
    return out


def preprocess(raw_dir: str | Path, window: tuple = (-1000.0, 400.0),
               max_thickness_mm: float = 2.5, min_readers: int = 3) -> NoduleDataset:
    """Raw annotations + volumes to an image-level dataset.

    ``raw_dir`` holds ``annotations.csv`` and ``volumes/<scan_id>.npz`` with
    arrays ``volume`` (z, y, x; HU) and ``spacing`` (z, y, x; mm).
    """
    raw_dir = Path(raw_dir)
    records = filter_scans(read_raw_annotations(raw_dir / "annotations.csv"), max_thickness_mm)
    by_nodule: dict = {}
    for rec in records:
        by_nodule.setdefault(rec.nodule_id, []).append(rec)

    cache: dict = {}

    def load(scan_id):
        if scan_id not in cache:
            z = np.load(raw_dir / "volumes" / f"{scan_id}.npz")
            spacing = tuple(float(s) for s in z["spacing"])
            cache.clear()
            cache[scan_id] = (resample_volume(z["volume"].astype(np.float32), spacing), spacing)
        return cache[scan_id]

    rows = []
    for nid in sorted(by_nodule):
        anns = by_nodule[nid]
        agg = aggregate_nodule(anns, min_readers=min_readers)
        if agg is None:
            logger.info("dropping %s: %d readers", nid, len(anns))
            continue
        if agg.malignancy_label == EXCLUDED:
            logger.info("dropping %s: median malignancy equals threshold", nid)
            continue
        for ann in sorted(anns, key=lambda a: a.reader_id):
            vol, spacing = load(ann.scan_id)
            centroid = [c * s for c, s in zip(ann.centroid, spacing)]
            z = min(max(int(round(centroid[0])), 0), vol.shape[0] - 1)
            sl = normalize_intensity(vol[z:z + 1], window)
            patch = extract_patch(sl, (0, centroid[1], centroid[2]))
            rows.append((nid, ann.reader_id, patch,
                         [agg.attribute_labels[a] for a in ATTRIBUTES], agg.malignancy_label))
    if not rows:
        raise DataError("no nodules survived preprocessing")
    return NoduleDataset(
        np.array([r[0] for r in rows]), np.array([r[1] for r in rows]),
        np.stack([r[2] for r in rows]).astype(np.float32),
        np.array([r[3] for r in rows], dtype=np.int64), np.array([r[4] for r in rows], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def malignancy_rule(attrs: dict) -> int:
    """Ground-truth rule of the synthetic corpus.

    Malignant iff ``spiculation + lobulation - margin >= 2``: spiky, lobulated,
    poorly defined nodules are malignant.
    """
    return MALIGNANT if attrs["spiculation"] + attrs["lobulation"] - attrs["margin"] >= 2 else BENIGN


def render_nodule(attrs: dict, rng: np.random.Generator, size: int = PATCH_SIZE,
                  noise: float = 0.02) -> np.ndarray:
    """Draw one nodule whose appearance is controlled by its attribute ordinals.

    subtlety -> radius, sphericity -> axis ratio, margin -> edge blur,
    lobulation -> 3-lobe contour modulation, spiculation -> contour spikes,
    texture -> fill intensity, internalStructure -> dark central cavity radius,
    calcification -> peak brightness of an off-centre calcium spot (6 = absent).
    """
    c = (size - 1) / 2 + rng.uniform(-1, 1, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # long axis stays near horizontal so elongation is readable without rotation invariance
    angle = rng.uniform(-0.15, 0.15)
    dy, dx = yy - c[0], xx - c[1]
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)

    radius = 3.0 + 1.0 * attrs["subtlety"]
    ratio = 0.4 + 0.15 * (attrs["sphericity"] - 1)
    r = np.hypot(u, v / ratio)
    theta = np.arctan2(v, u)
    lobes = 0.09 * (attrs["lobulation"] - 1) * np.cos(3 * theta + rng.uniform(0, 2 * np.pi))
    spikes = 0.22 * (attrs["spiculation"] - 1) * np.maximum(np.cos(7 * theta), 0.0) ** 12
    boundary = radius * (1.0 + lobes + spikes)
    sigma = 0.3 + 0.8 * (5 - attrs["margin"])
    mask = 0.5 * (1.0 + np.tanh((boundary - r) / sigma))

    fill = 0.2 + 0.08 * (attrs["texture"] - 1)
    cavity = 0.18 * (attrs["internalStructure"] - 1) * radius
    core = 0.5 * (1.0 + np.tanh((cavity - r) / 0.4)) if cavity > 0 else 0.0
    img = fill * mask * (1.0 - 0.85 * core)
    if attrs["calcification"] < 6:
        # peak brightness set by the rating alone, off-centre so it clears the cavity
        level = 0.5 + 0.1 * (5 - attrs["calcification"])
        img = np.maximum(img, level * np.exp(-(np.hypot(u + 0.7 * radius, v) / 1.6) ** 2))
    img += noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# Per-class attribute bands (inclusive). The union of both bands covers every
# rating scale; the bands of the rule attributes are disjoint.
CLASS_BANDS = {
    MALIGNANT: {"subtlety": (3, 5), "internalStructure": (1, 2), "calcification": (5, 6),
                "sphericity": (1, 3), "margin": (1, 3), "lobulation": (3, 5),
                "spiculation": (3, 5), "texture": (3, 5)},
    BENIGN: {"subtlety": (1, 3), "internalStructure": (1, 4), "calcification": (1, 6),
             "sphericity": (3, 5), "margin": (3, 5), "lobulation": (1, 2),
             "spiculation": (1, 2), "texture": (1, 3)},
}


def _sample_attributes(rng: np.random.Generator, malignant: bool) -> dict:
    bands = CLASS_BANDS[MALIGNANT if malignant else BENIGN]
    return {name: int(rng.integers(lo, hi + 1)) for name, (lo, hi) in bands.items()}


def generate_synthetic_dataset(n_nodules: int, seed: int, malignant_fraction: float = 0.5,
                               noise: float = 0.02) -> list:
    """Procedurally rendered nodules with labels recoverable by construction.

    Malignancy always equals :func:`malignancy_rule` applied to the attributes.
    """
    if n_nodules < 10:
        raise DataError("generate_synthetic_dataset needs n_nodules >= 10")
    rng = np.random.default_rng(seed)
    nodules = []
    width = len(str(n_nodules - 1))
    for i in range(n_nodules):
        attrs = _sample_attributes(rng, bool(rng.random() < malignant_fraction))
        label = malignancy_rule(attrs)
        patch = render_nodule(attrs, rng, noise=noise)
        nodules.append(AggregatedNodule(f"syn{i:0{width}d}", patch, attrs, label, reader_count=3))
    return nodules

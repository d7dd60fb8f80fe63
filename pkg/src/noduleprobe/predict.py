"""Stage 2: linear attribute probes on frozen features and a malignancy probe
reading the features concatenated with the attribute logits.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import augment_probe
from .data import ATTRIBUTE_RANGES, ATTRIBUTES, CLASS_COUNTS, EXCLUDED, AnnotationMask, NoduleDataset
from .model import (EncoderConfig, FeatureVector, ModelError, build_encoder, extract_feature, feature_dim,
                    is_frozen, read_checkpoint, save_checkpoint, load_into)

logger = logging.getLogger(__name__)

TERM_NAMES = (*ATTRIBUTES, "malignancy")


class ProbeError(ValueError):
    pass


@dataclass
class ProbeTrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float | None = None  # None: 0.0005 with full annotation, 0.00025 otherwise
    lr_full: float = 0.0005
    lr_partial: float = 0.00025
    momentum: float = 0.9
    weight_decay: float = 0.0
    feature_source: str = "concat_last_4"
    augment: bool = True
    stop_gradient: bool = False
    include_excluded: bool = False
    # rescale features by training-set mean/std (a fixed affine map, so the heads stay linear)
    standardize: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ProbeError("epochs must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ProbeError("lr must be positive")

    def resolve_lr(self, fraction: float) -> float:
        if self.lr is not None:
            return self.lr
        return self.lr_full if fraction >= 1 else self.lr_partial


class ProbeHeads(nn.Module):
    """One linear head per attribute plus the malignancy head over ``f ⊕ z_exp``."""

    def __init__(self, feature_dim: int, class_counts=CLASS_COUNTS, stop_gradient: bool = False,
                 feature_source: str = "concat_last_4"):
        super().__init__()
        if len(class_counts) != len(ATTRIBUTES):
            raise ProbeError(f"need {len(ATTRIBUTES)} class counts, got {len(class_counts)}")
        self.feature_dim = feature_dim
        self.class_counts = tuple(int(c) for c in class_counts)
        self.stop_gradient = stop_gradient
        self.feature_source = feature_source
        self.attribute_heads = nn.ModuleList(nn.Linear(feature_dim, c) for c in self.class_counts)
        self.malignancy_head = nn.Linear(feature_dim + sum(self.class_counts), 2)
        self.register_buffer("feature_mean", torch.zeros(feature_dim))
        self.register_buffer("feature_scale", torch.ones(feature_dim))
        for lin in [*self.attribute_heads, self.malignancy_head]:
            nn.init.normal_(lin.weight, std=0.01)
            nn.init.zeros_(lin.bias)

    @property
    def concat_dim(self) -> int:
        return self.feature_dim + sum(self.class_counts)

    def set_standardization(self, feats):
        feats = _as_tensor(feats)
        self.feature_mean.copy_(feats.mean(0))
        self.feature_scale.copy_(feats.std(0, unbiased=False).clamp_min(1e-6))

    def forward(self, f):
        z_exp = predict_attributes(self, f)
        return z_exp, predict_malignancy(self, f, z_exp)

    def config(self) -> dict:
        return {"feature_dim": self.feature_dim, "class_counts": list(self.class_counts),
                "stop_gradient": self.stop_gradient, "feature_source": self.feature_source}


def _as_tensor(f):
    if isinstance(f, FeatureVector):
        f = f.values
    if isinstance(f, torch.Tensor):
        return f.float()
    return torch.as_tensor(np.asarray(f), dtype=torch.float32)


def predict_attributes(probe: ProbeHeads, f) -> list:
    """Logit vector per attribute, in canonical attribute order."""
    f = _as_tensor(f)
    if f.shape[-1] != probe.feature_dim:
        raise ProbeError(f"probe expects {probe.feature_dim}-dim features, got {f.shape[-1]}")
    f = (f - probe.feature_mean) / probe.feature_scale
    return [head(f) for head in probe.attribute_heads]


def predict_malignancy(probe: ProbeHeads, f, attribute_logits) -> torch.Tensor:
    """Two malignancy logits from ``f`` followed by the attribute logits in canonical order."""
    f = _as_tensor(f)
    if f.shape[-1] == probe.feature_dim:
        f = (f - probe.feature_mean) / probe.feature_scale
    if probe.stop_gradient:
        attribute_logits = [z.detach() for z in attribute_logits]
    cat = torch.cat([f, *attribute_logits], dim=-1)
    if cat.shape[-1] != probe.concat_dim:
        raise ProbeError(f"concatenation has length {cat.shape[-1]}, expected {probe.concat_dim}")
    return probe.malignancy_head(cat)


def attribute_targets(ordinals) -> torch.Tensor:
    """Ordinal labels ``[N, 8]`` to zero-based class indices; range-checked."""
    ordinals = torch.as_tensor(np.asarray(ordinals), dtype=torch.long)
    if ordinals.ndim != 2 or ordinals.shape[1] != len(ATTRIBUTES):
        raise ProbeError(f"expected [N, {len(ATTRIBUTES)}] attribute labels")
    out = torch.empty_like(ordinals)
    for k, name in enumerate(ATTRIBUTES):
        lo, hi = ATTRIBUTE_RANGES[name]
        col = ordinals[:, k]
        if ((col < lo) | (col > hi)).any():
            raise ProbeError(f"{name} label outside [{lo}, {hi}]")
        out[:, k] = col - lo
    return out


def loss_stage2(attribute_logits, malignancy_logits, attribute_labels, malignancy_labels):
    """Sum of the eight attribute cross-entropies and the malignancy cross-entropy.

    ``attribute_labels`` are ordinals ``[N, 8]``; ``malignancy_labels`` are 0/1
    with ``-1`` marking rows without malignancy supervision. Returns
    ``(total, {term name: value})``; total is the unweighted sum of the terms.
    """
    targets = attribute_targets(attribute_labels)
    terms = {}
    for k, name in enumerate(ATTRIBUTES):
        terms[name] = F.cross_entropy(attribute_logits[k], targets[:, k])
    mal = torch.as_tensor(np.asarray(malignancy_labels), dtype=torch.long)
    if ((mal != EXCLUDED) & ((mal < 0) | (mal > 1))).any():
        raise ProbeError("malignancy labels must be 0, 1 or -1")
    valid = mal != EXCLUDED
    if valid.any():
        terms["malignancy"] = F.cross_entropy(malignancy_logits[valid], mal[valid])
    else:
        terms["malignancy"] = malignancy_logits.sum() * 0.0
    total = sum(terms.values())
    return total, terms


def predict_labels(probe: ProbeHeads, f):
    """Ordinal attribute predictions ``[N, 8]`` and malignancy predictions ``[N]``."""
    with torch.no_grad():
        z_exp, z_cls = probe(_as_tensor(f))
    attrs = torch.stack([z.argmax(-1) + ATTRIBUTE_RANGES[name][0]
                         for z, name in zip(z_exp, ATTRIBUTES)], dim=1)
    return attrs.numpy(), z_cls.argmax(-1).numpy()


def _cosine_lr(base, epoch, epochs):
    return 0.5 * base * (1 + math.cos(math.pi * epoch / epochs))


def _annotated(dataset: NoduleDataset, mask: AnnotationMask | None, include_excluded: bool) -> NoduleDataset:
    ds = dataset if mask is None else dataset.subset(mask.annotated_ids)
    if not include_excluded:
        ds = ds.subset(sorted({n for n, m in zip(ds.nodule_ids, ds.malignancy) if m != EXCLUDED}))
    return ds


def train_stage2(encoder: nn.Module, dataset: NoduleDataset, mask: AnnotationMask | None,
                 config: ProbeTrainConfig | None = None, seed: int = 0, log_path: str | Path | None = None):
    """Fit the probes on the annotated images only; the encoder is never updated.

    Returns ``(ProbeHeads, per-epoch log)``.
    """
    config = config or ProbeTrainConfig()
    if not is_frozen(encoder):
        raise ProbeError("train_stage2 needs a frozen encoder")
    ds = _annotated(dataset, mask, config.include_excluded)
    if len(ds) == 0 or not (ds.malignancy != EXCLUDED).any():
        raise ProbeError("no annotated samples with malignancy labels")
    fraction = mask.fraction if mask is not None else 1.0
    lr = config.resolve_lr(fraction)

    torch.manual_seed(seed)
    probe = ProbeHeads(feature_dim(encoder, config.feature_source), stop_gradient=config.stop_gradient,
                       feature_source=config.feature_source)
    opt = torch.optim.SGD(probe.parameters(), lr=lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    cached = None
    if not config.augment or config.standardize:
        cached = torch.from_numpy(extract_feature(encoder, ds.patches, config.feature_source).values)
    if config.standardize:
        probe.set_standardization(cached)
    if config.augment:
        cached = None
    log, fh = [], None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w")
    n = len(ds)
    try:
        for epoch in range(config.epochs):
            for g in opt.param_groups:
                g["lr"] = _cosine_lr(lr, epoch, config.epochs)
            if cached is None:
                imgs = augment_probe(ds.patches, seed=(seed, epoch))
                feats = torch.from_numpy(extract_feature(encoder, imgs, config.feature_source).values)
            else:
                feats = cached
            order = np.random.default_rng([seed, epoch]).permutation(n)
            sums, count = {k: 0.0 for k in TERM_NAMES}, 0
            total_sum = 0.0
            for b in range(0, n, config.batch_size):
                idx = order[b:b + config.batch_size]
                z_exp, z_cls = probe(feats[idx])
                total, terms = loss_stage2(z_exp, z_cls, ds.attributes[idx], ds.malignancy[idx])
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                total_sum += float(total.detach()) * len(idx)
                for k, v in terms.items():
                    sums[k] += float(v.detach()) * len(idx)
                count += len(idx)
            record = {"epoch": epoch, "lr": opt.param_groups[0]["lr"], "loss": total_sum / count,
                      "terms": {k: v / count for k, v in sums.items()}}
            log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
    finally:
        if fh:
            fh.close()
    probe.eval()
    return probe, log


def save_probe(path, probe: ProbeHeads, extras: dict | None = None):
    return save_checkpoint(path, probe, probe.config(), extras, kind="probe")


def load_probe(path) -> ProbeHeads:
    obj = read_checkpoint(path)
    if obj.get("kind") != "probe":
        raise ModelError(f"{path} is not a probe checkpoint")
    cfg = obj["config"]
    probe = ProbeHeads(cfg["feature_dim"], cfg["class_counts"], cfg["stop_gradient"], cfg["feature_source"])
    load_into(probe, obj)
    probe.eval()
    return probe


# ---------------------------------------------------------------------------
# end-to-end supervised baseline


def train_end_to_end(dataset: NoduleDataset, mask: AnnotationMask | None, enc_cfg: EncoderConfig | None = None,
                     epochs: int = 30, batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
                     augment: bool = True):
    """Train encoder and probe heads jointly from random initialisation on the
    annotated images; the comparison baseline for annotation sweeps.

    Returns ``(frozen encoder, ProbeHeads)``.
    """
    from .model import freeze

    enc_cfg = enc_cfg or EncoderConfig(backbone_kind="cnn-small", embed_dim=64)
    ds = _annotated(dataset, mask, include_excluded=False)
    if len(ds) == 0:
        raise ProbeError("no annotated samples with malignancy labels")
    torch.manual_seed(seed)
    encoder = build_encoder(enc_cfg)
    probe = ProbeHeads(encoder.embed_dim, feature_source="final_token")
    params = list(encoder.parameters()) + list(probe.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=1e-4)
    n = len(ds)
    encoder.train()
    for epoch in range(epochs):
        for g in opt.param_groups:
            g["lr"] = _cosine_lr(lr, epoch, epochs)
        imgs = augment_probe(ds.patches, seed=(seed, epoch), enabled=augment)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # BatchNorm needs more than one sample
            f = encoder(torch.from_numpy(imgs[idx])[:, None])
            z_exp, z_cls = probe(f)
            total, _ = loss_stage2(z_exp, z_cls, ds.attributes[idx], ds.malignancy[idx])
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
    probe.eval()
    return freeze(encoder), probe

"""Multi-crop view generation for self-distillation and light probe augmentation.

Every view records the exact parameters that produced it so it can be
replayed with :func:`apply_view_log`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

RECIPE = ("crop", "flip", "jitter", "blur", "solarize")


class AugmentError(ValueError):
    pass


@dataclass
class ViewConfig:
    n_global: int = 2
    n_local: int = 8
    global_crop_scale: tuple = (0.4, 1.0)
    local_crop_scale: tuple = (0.05, 0.4)
    global_size: int = 32
    local_size: int = 16
    recipe: tuple = RECIPE
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: float = 0.4
    # per global view index; the last entry is reused for further global views
    blur_p_global: tuple = (1.0, 0.1)
    blur_p_local: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    solarize_p_global: tuple = (0.0, 0.2)
    solarize_p_local: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.global_crop_scale = tuple(float(s) for s in self.global_crop_scale)
        self.local_crop_scale = tuple(float(s) for s in self.local_crop_scale)
        self.blur_p_global = tuple(float(p) for p in self.blur_p_global)
        self.solarize_p_global = tuple(float(p) for p in self.solarize_p_global)
        self.blur_sigma = tuple(float(s) for s in self.blur_sigma)
        self.recipe = tuple(self.recipe)
        self.validate()

    def validate(self):
        if self.n_global < 2:
            raise AugmentError("n_global must be >= 2")
        if self.n_local < 0:
            raise AugmentError("n_local must be >= 0")
        for lo, hi in (self.global_crop_scale, self.local_crop_scale):
            if not 0 < lo <= hi <= 1:
                raise AugmentError(f"crop scale interval ({lo}, {hi}) not inside (0, 1]")
        if self.n_local and self.local_crop_scale[1] > self.global_crop_scale[0]:
            raise AugmentError("local crop scale must not exceed the global lower bound")
        if self.n_local and self.local_size >= self.global_size:
            raise AugmentError("local views must be smaller than global views")
        unknown = set(self.recipe) - set(RECIPE)
        if unknown:
            raise AugmentError(f"unknown transforms {sorted(unknown)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewBatch:
    global_views: np.ndarray  # [n_global, N, 1, H, W]
    local_views: np.ndarray   # [n_local, N, 1, h, w]
    provenance: list = field(default_factory=list)  # [n_views][N] -> transform log

    @property
    def n_views(self) -> int:
        return len(self.global_views) + len(self.local_views)


def _seed_seq(seed) -> list:
    return list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]


def _sample_crop(rng, h, w, scale, ratio=(3 / 4, 4 / 3)):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return [int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw]
    side = min(h, w, max(1, int(round(math.sqrt(area * scale[1])))))
    return [(h - side) // 2, (w - side) // 2, side, side]


def _sample_view_log(rng, cfg: ViewConfig, h, w, kind: str, index: int) -> dict:
    if kind == "global":
        scale, size = cfg.global_crop_scale, cfg.global_size
        blur_p = cfg.blur_p_global[min(index, len(cfg.blur_p_global) - 1)]
        sol_p = cfg.solarize_p_global[min(index, len(cfg.solarize_p_global) - 1)]
    else:
        scale, size = cfg.local_crop_scale, cfg.local_size
        blur_p, sol_p = cfg.blur_p_local, cfg.solarize_p_local
    log = {"kind": kind, "index": index, "size": size, "crop": [0, 0, h, w],
           "flip": False, "jitter": None, "blur": None, "solarize": False, "order": list(cfg.recipe)}
    # draw every random number regardless of the recipe so toggling one
    # transform leaves the others' draws unchanged
    crop = _sample_crop(rng, h, w, scale)
    flip = bool(rng.random() < cfg.flip_p)
    do_jitter = bool(rng.random() < cfg.jitter_p)
    s = cfg.jitter_strength
    jitter = [float(rng.uniform(1 - s, 1 + s)), float(rng.uniform(1 - s, 1 + s))]
    do_blur = bool(rng.random() < blur_p)
    sigma = float(rng.uniform(*cfg.blur_sigma))
    sol = bool(rng.random() < sol_p)
    if "crop" in cfg.recipe:
        log["crop"] = crop
    if "flip" in cfg.recipe:
        log["flip"] = flip
    if "jitter" in cfg.recipe and do_jitter:
        log["jitter"] = jitter
    if "blur" in cfg.recipe and do_blur:
        log["blur"] = sigma
    if "solarize" in cfg.recipe:
        log["solarize"] = sol
    return log


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def apply_view_log(patch: np.ndarray, log: dict) -> np.ndarray:
    """Replay one logged view on its source patch."""
    top, left, ch, cw = log["crop"]
    out = patch[top:top + ch, left:left + cw]
    out = resize(out, log["size"])
    for name in log["order"]:
        if name == "flip" and log["flip"]:
            out = out[:, ::-1].copy()
        elif name == "jitter" and log["jitter"] is not None:
            brightness, contrast = log["jitter"]
            out = out * brightness
            mean = out.mean()
            out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
        elif name == "blur" and log["blur"] is not None:
            out = ndimage.gaussian_filter(out, log["blur"], mode="reflect")
        elif name == "solarize" and log["solarize"]:
            out = np.where(out >= 0.5, 1.0 - out, out)
    return out.astype(np.float32)


def make_views(batch: np.ndarray, config: ViewConfig, seed=None) -> ViewBatch:
    """Generate ``n_global`` global and ``n_local`` local views per sample.

    ``batch`` is ``[N, H, W]`` or ``[N, 1, H, W]``. Sample ``i`` draws from the
    substream ``(seed..., i)`` so results do not depend on processing order.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim == 4:
        if batch.shape[1] != 1:
            raise AugmentError("only single-channel patches are supported")
        batch = batch[:, 0]
    if batch.ndim != 3:
        raise AugmentError(f"expected [N, H, W] patches, got shape {batch.shape}")
    n, h, w = batch.shape
    smallest = int(round(math.sqrt(min(config.local_crop_scale[0] if config.n_local else 1.0,
                                       config.global_crop_scale[0]) * h * w)))
    if min(h, w) < 4 or smallest < 2:
        raise AugmentError(f"patch {h}x{w} is smaller than the minimum crop")
    base = _seed_seq(config.seed if seed is None else seed)
    kinds = [("global", j) for j in range(config.n_global)] + [("local", j) for j in range(config.n_local)]
    gv = np.empty((config.n_global, n, 1, config.global_size, config.global_size), np.float32)
    lv = np.empty((config.n_local, n, 1, config.local_size, config.local_size), np.float32)
    provenance = [[None] * n for _ in kinds]
    for i in range(n):
        rng = np.random.default_rng(base + [i])
        for v, (kind, j) in enumerate(kinds):
            log = _sample_view_log(rng, config, h, w, kind, j)
            log["sample"] = i
            provenance[v][i] = log
            (gv if kind == "global" else lv)[j, i, 0] = apply_view_log(batch[i], log)
    return ViewBatch(gv, lv, provenance)


def hflip(patch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(patch[..., ::-1])


def augment_probe(batch: np.ndarray, seed, enabled: bool = True, flip_p: float = 0.5,
                  max_rotation: float = 10.0, max_shift: int = 2) -> np.ndarray:
    """Label-preserving flips, small rotations and shifts for stage-2 inputs."""
    batch = np.asarray(batch, dtype=np.float32)
    if not enabled:
        return batch.copy()
    base = _seed_seq(seed)
    out = np.empty_like(batch)
    for i in range(len(batch)):
        rng = np.random.default_rng(base + [i])
        img = batch[i]
        flip = rng.random() < flip_p
        angle = rng.uniform(-max_rotation, max_rotation)
        shift = rng.integers(-max_shift, max_shift + 1, size=2)
        if flip:
            img = hflip(img)
        if max_rotation > 0:
            img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
        if max_shift > 0 and shift.any():
            img = ndimage.shift(img, shift, order=0, mode="nearest")
        out[i] = img
    return out

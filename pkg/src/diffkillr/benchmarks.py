"""Synthetic benchmarks shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffeo_gen import AugmentationConfig, sample_diffeo, warp_array
from .mapping_net import MapperModel, register_many, registration_augmentation, transfer_label
from .patch_bank import BankEntry, CellPatch, LabelStack
from .rng import substream
from .synth import (EvalPair, ShapeSpec, dice, gen_pair, gen_shape, iou, l1_field, l1_image,
                    ncc_field)

# Row order of the registration table.
TABLE_METRICS = ("ncc_field", "l1_field", "l1_image", "dsc_mask", "iou_mask")


def archetype_entries(shapes: Sequence[ShapeSpec], size: int = 32) -> List[BankEntry]:
    return [BankEntry(*gen_shape(s, size, k)) for k, s in enumerate(shapes)]


def registration_pairs(shapes: Sequence[ShapeSpec], n: int, seed: int = 0, size: int = 32,
                       config: Optional[AugmentationConfig] = None) -> List[EvalPair]:
    """Held-out pairs: each shape (cycled) with a fresh texture and a fresh deformation."""
    rng = substream(seed, "registration-pairs")
    config = config or registration_augmentation(size)
    pairs = []
    for k in range(n):
        spec = sample_diffeo(rng, config, size)
        pairs.append(gen_pair(shapes[k % len(shapes)], spec, seed=int(rng.integers(2**31)), size=size))
    return pairs


def evaluate_registration(mapper: MapperModel, pairs: Sequence[EvalPair]) -> Dict[str, np.ndarray]:
    """Per-pair field, image and mask metrics, plus the zero-field image L1 for comparison."""
    start = time.perf_counter()
    results = register_many(mapper, [p.fixed for p in pairs], [p.moving for p in pairs])
    per_pair_ms = 1000.0 * (time.perf_counter() - start) / max(1, len(pairs))
    out = {k: [] for k in TABLE_METRICS + ("l1_image_identity",)}
    for p, r in zip(pairs, results):
        moved = transfer_label(r, p.fixed_labels).mask()
        truth = p.moving_labels.mask()
        out["ncc_field"].append(ncc_field(r.forward, p.gt_forward))
        out["l1_field"].append(l1_field(r.forward, p.gt_forward))
        out["l1_image"].append(l1_image(warp_array(r.forward, p.moving.intensities), p.fixed))
        out["l1_image_identity"].append(l1_image(p.moving, p.fixed))
        out["dsc_mask"].append(dice(moved, truth))
        out["iou_mask"].append(iou(moved, truth))
    arrays = {k: np.asarray(v, float) for k, v in out.items()}
    arrays["runtime_ms"] = np.full(len(pairs), per_pair_ms)
    return arrays


def summarize(values: Dict[str, np.ndarray]) -> Dict[str, Dict[str, float]]:
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in values.items()}


# --------------------------------------------------------------------------
# Orientation
# --------------------------------------------------------------------------


def ellipse_archetypes() -> List[ShapeSpec]:
    return [
        ShapeSpec("ellipse", a=11.0, b=4.5, foreground=0.7, texture=0.08),
        ShapeSpec("ellipse", a=10.0, b=6.0, foreground=0.5, texture=0.08),
    ]


def rotation_augmentation(size: int = 32) -> AugmentationConfig:
    """Bank augmentation for orientation work: the bank must cover every orientation."""
    return AugmentationConfig(kinds={"rotation": 1.0}, patch_size=size)


def orientation_queries(shapes: Sequence[ShapeSpec], n: int, seed: int = 0, size: int = 32,
                        jitter: float = 0.08) -> Tuple[List[CellPatch], List[LabelStack]]:
    """Freshly rasterized ellipses at uniform random orientation with jittered axes.

    Ground truth comes straight from the rasterizer, not from any warp.
    """
    rng = substream(seed, "orientation-queries")
    patches, truths = [], []
    for k in range(n):
        s = shapes[k % len(shapes)]
        ja, jb = rng.uniform(1 - jitter, 1 + jitter, 2)
        q = ShapeSpec("ellipse", a=s.a * ja, b=s.b * jb, angle=float(rng.uniform(-math.pi, math.pi)),
                      foreground=s.foreground, background=s.background, texture=s.texture)
        p, l = gen_shape(q, size, seed=int(rng.integers(2**31)))
        patches.append(p)
        truths.append(l)
    return patches, truths

"""Applications: cell counting, orientation transfer and few-shot instance segmentation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffeo_gen import InterpPolicy
from .errors import ConfigError, DimensionError, ParameterError
from .invariant_net import EncoderModel, MatchResult, _bank_embeddings, match_embedding
from .mapping_net import MapperModel, RegistrationResult, register_many, transfer_label
from .patch_bank import CellBank, CellPatch, LabelStack, WholeImage, extract_patch
from .sampling import HardExampleSampler
from .synth import angular_error, dice, iou, mean_direction


@dataclass
class PipelineConfig:
    """Scan and matching settings.  ``None`` sizes derive from ``patch_size``.

    ``refine_top_k`` registers each cell against its ``k`` nearest bank
    records and keeps the one with the lowest alignment residual; ``1`` uses
    the nearest record alone.  ``refine_radius`` moves each surviving
    detection to the best-scoring pixel within that many pixels of it
    (``0`` keeps scan-grid positions).
    """

    patch_size: int = 32
    stride: Optional[int] = None
    score_threshold: float = 0.5
    nms_radius: Optional[float] = None
    match_radius: Optional[float] = None
    refine_radius: Optional[int] = None
    hard_mining_ratio: float = 0.0
    refine_top_k: int = 1
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.patch_size // 4)
        if self.nms_radius is None:
            # A cell stays visible from scan positions up to a stride beyond its best one.
            self.nms_radius = self.patch_size / 2 + self.stride
        if self.match_radius is None:
            self.match_radius = self.patch_size / 2
        if self.refine_radius is None:
            self.refine_radius = self.stride // 2
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.refine_radius < 0:
            raise ConfigError("refine_radius must be >= 0")
        if not 0.0 <= self.hard_mining_ratio <= 1.0:
            raise ConfigError("hard_mining_ratio must lie in [0, 1]")
        if self.refine_top_k < 1:
            raise ConfigError("refine_top_k must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Detection:
    center: Tuple[float, float]
    score: float
    archetype: int


@dataclass
class CountResult:
    detections: List[Detection]
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None

    def metrics(self) -> Dict[str, Optional[float]]:
        return {"count": len(self.detections), "precision": self.precision, "recall": self.recall, "f1": self.f1}


# --------------------------------------------------------------------------
# Counting
# --------------------------------------------------------------------------


def nms(points: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in acceptance order.

    Candidates are visited by descending score, ties by ascending ``(x, y)``;
    a candidate within ``radius`` of an accepted point is dropped.
    """
    pts = np.asarray(points, float).reshape(-1, 2)
    sc = np.asarray(scores, float)
    if not np.all(np.isfinite(sc)):
        raise ParameterError("nms needs finite scores")
    order = np.lexsort((pts[:, 1], pts[:, 0], -sc))
    kept: List[int] = []
    for k in order:
        if all(math.hypot(*(pts[k] - pts[a])) > radius for a in kept):
            kept.append(int(k))
    return np.asarray(kept, dtype=int)


def match_detections(pred: np.ndarray, truth: np.ndarray, radius: float) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching of predicted to true centroids, closest pairs first."""
    pred, truth = np.asarray(pred, float).reshape(-1, 2), np.asarray(truth, float).reshape(-1, 2)
    if not len(pred) or not len(truth):
        return []
    d = np.linalg.norm(pred[:, None] - truth[None], axis=-1)
    pairs = np.argwhere(d <= radius)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0], d[pairs[:, 0], pairs[:, 1]]))]
    used_p, used_t, out = set(), set(), []
    for p, t in pairs:
        if p not in used_p and t not in used_t:
            used_p.add(p)
            used_t.add(t)
            out.append((int(p), int(t)))
    return out


def detection_scores(image: WholeImage, encoder: EncoderModel, bank: CellBank, cfg: PipelineConfig):
    """Scan centres, cell-likelihood scores and nearest archetype for every stride step."""
    h, w = image.shape
    if h < cfg.patch_size or w < cfg.patch_size:
        raise DimensionError(f"image {h}x{w} smaller than patch size {cfg.patch_size}")
    if not bank.background:
        raise ConfigError("counting needs background exemplars in the bank")
    ys = np.arange(cfg.stride // 2, h, cfg.stride)
    xs = np.arange(cfg.stride // 2, w, cfg.stride)
    centers = np.array([(x, y) for y in ys for x in xs], dtype=float)
    return (centers,) + _score_at(image, centers, encoder, bank, cfg)


def _score_at(image: WholeImage, centers: np.ndarray, encoder: EncoderModel, bank: CellBank, cfg: PipelineConfig):
    emb = encoder.encode([extract_patch(image, c, cfg.patch_size) for c in centers])
    cell_emb = _bank_embeddings(encoder, bank)
    bg_emb = bank.background_embeddings
    if bg_emb is None:
        bg_emb = encoder.encode(bank.background)
    d_cell_all = np.linalg.norm(emb[:, None] - cell_emb[None], axis=-1)
    d_cell = d_cell_all.min(axis=1)
    d_bg = np.linalg.norm(emb[:, None] - bg_emb[None], axis=-1).min(axis=1)
    scores = d_bg / np.maximum(d_bg + d_cell, 1e-12)
    records = bank.records()
    archetype = np.array([records[k].entry for k in d_cell_all.argmin(axis=1)])
    return scores, archetype


def _refine(image: WholeImage, centers: np.ndarray, encoder: EncoderModel, bank: CellBank, cfg: PipelineConfig):
    """Best-scoring pixel within ``refine_radius`` of each centre (ties keep the earliest offset)."""
    r = cfg.refine_radius
    h, w = image.shape
    offsets = np.array([(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=float)
    cand = (centers[:, None, :] + offsets[None]).reshape(-1, 2)
    cand = np.clip(cand, 0, [w - 1, h - 1])
    scores, archetype = _score_at(image, cand, encoder, bank, cfg)
    best = scores.reshape(len(centers), -1).argmax(axis=1) + np.arange(len(centers)) * len(offsets)
    return cand[best], scores[best], archetype[best]


def scan_count(image: WholeImage, encoder: EncoderModel, bank: CellBank, cfg: PipelineConfig = None) -> CountResult:
    """Raster-scan ``image``, score each patch against cell and background exemplars, suppress, refine."""
    cfg = cfg or PipelineConfig()
    centers, scores, archetype = detection_scores(image, encoder, bank, cfg)
    cand = np.flatnonzero(scores > cfg.score_threshold)
    kept = cand[nms(centers[cand], scores[cand], cfg.nms_radius)] if len(cand) else cand
    centers, scores, archetype = centers[kept], scores[kept], archetype[kept]
    if cfg.refine_radius and len(kept):
        centers, scores, archetype = _refine(image, centers, encoder, bank, cfg)
    dets = [Detection((float(c[0]), float(c[1])), float(s), int(a)) for c, s, a in zip(centers, scores, archetype)]
    dets.sort(key=lambda d: (d.center[1], d.center[0]))
    result = CountResult(dets)
    if image.centroids is not None:
        pred = np.array([d.center for d in dets]).reshape(-1, 2)
        tp = len(match_detections(pred, image.centroids, cfg.match_radius))
        result.precision = tp / len(dets) if dets else (1.0 if len(image.centroids) == 0 else 0.0)
        result.recall = tp / len(image.centroids) if len(image.centroids) else 1.0
        pr = result.precision + result.recall
        result.f1 = 2 * result.precision * result.recall / pr if pr else 0.0
    return result


# --------------------------------------------------------------------------
# Label transfer for many cells
# --------------------------------------------------------------------------


@dataclass
class Transfer:
    """The outcome of matching and registering one query cell."""

    match: MatchResult
    registration: RegistrationResult
    labels: LabelStack


def _chunks(n: int, workers: int) -> List[range]:
    step = max(1, math.ceil(n / max(1, workers)))
    return [range(a, min(n, a + step)) for a in range(0, n, step)]


def match_and_transfer(queries: Sequence[CellPatch], encoder: EncoderModel, mapper: MapperModel, bank: CellBank,
                       cfg: PipelineConfig = None, policy: Optional[InterpPolicy] = None) -> List[Transfer]:
    """Match each query, register it against the chosen record, carry the record's labels over."""
    cfg = cfg or PipelineConfig()
    if not queries:
        return []
    records = bank.records()
    bank_emb = _bank_embeddings(encoder, bank)
    q_emb = encoder.encode(queries)
    candidates = [match_embedding(e, bank_emb, bank, cfg.refine_top_k) for e in q_emb]

    def work(idx: range) -> List[Transfer]:
        out = []
        for n in idx:
            cands = candidates[n]
            regs = register_many(mapper, [records[c.record].patch for c in cands], [queries[n]] * len(cands))
            best = int(np.argmin([r.alignment_residual for r in regs])) if len(regs) > 1 else 0
            rec = records[cands[best].record]
            out.append(Transfer(cands[best], regs[best], transfer_label(regs[best], rec.labels, policy)))
        return out

    parts = _chunks(len(queries), cfg.workers)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(p) for p in parts]
    return [t for part in results for t in part]


# --------------------------------------------------------------------------
# Orientation
# --------------------------------------------------------------------------


@dataclass
class OrientationResult:
    angles: np.ndarray
    baseline_angles: np.ndarray
    labels: List[LabelStack]
    baseline_labels: List[LabelStack]
    metrics: Dict[str, float] = field(default_factory=dict)


def _fold(deg: np.ndarray, period: float = 360.0) -> np.ndarray:
    d = np.mod(np.asarray(deg, float), period)
    return np.minimum(d, period - d)


def _label_l1(pred: LabelStack, truth: LabelStack, axial: bool) -> float:
    p, t = pred.orientation(), truth.orientation()
    err = np.abs(p - t).sum(axis=-1)
    if axial:
        err = np.minimum(err, np.abs(p + t).sum(axis=-1))
    return float(np.mean(err))


def _label_angle(pred: LabelStack, truth: LabelStack, axial: bool) -> float:
    err = angular_error(pred.orientation(), truth.orientation(), pred.mask(), truth.mask(), axial=axial)
    if math.isnan(err):
        # Disjoint foregrounds: compare the cells' mean directions instead.
        a = mean_direction(pred.orientation(), pred.mask(), axial)
        b = mean_direction(truth.orientation(), truth.mask(), axial)
        err = float(_fold(np.degrees(a - b), 180.0 if axial else 360.0))
    return err


def predict_orientation(queries: Sequence[CellPatch], encoder: EncoderModel, mapper: MapperModel, bank: CellBank,
                        cfg: PipelineConfig = None, truths: Optional[Sequence[LabelStack]] = None,
                        axial: bool = True) -> OrientationResult:
    """Per-cell orientation by label transfer, alongside the copy-the-matched-label baseline.

    The baseline copies the orientation label of the nearest bank record
    (``refine_top_k`` does not apply to it).  With ``truths``, reports
    ``d_l1``, ``d_theta`` (mean pixel angular error, degrees) and
    ``angle_error`` (per-cell mean direction error) for both.  ``axial``
    compares orientations modulo 180 degrees, as for elongated cells.
    """
    cfg = cfg or PipelineConfig()
    if any(e.labels is None or e.labels.orientation() is None for e in bank.entries):
        raise ConfigError("orientation prediction needs orientation-gradient labels on every archetype")
    transfers = match_and_transfer(queries, encoder, mapper, bank, cfg, InterpPolicy.for_labels())
    records = bank.records()
    bank_emb = _bank_embeddings(encoder, bank)
    nearest = [match_embedding(e, bank_emb, bank, 1)[0] for e in encoder.encode(queries)]
    baseline = [records[m.record].labels for m in nearest]
    labels = [t.labels for t in transfers]
    angles = np.array([mean_direction(l.orientation(), l.mask(), axial) for l in labels])
    base_angles = np.array([mean_direction(l.orientation(), l.mask(), axial) for l in baseline])
    result = OrientationResult(angles, base_angles, labels, baseline)
    if truths is not None:
        period = 180.0 if axial else 360.0
        true_angles = np.array([mean_direction(t.orientation(), t.mask(), axial) for t in truths])
        result.metrics = {
            "d_l1": float(np.mean([_label_l1(p, t, axial) for p, t in zip(labels, truths)])),
            "d_theta": float(np.mean([_label_angle(p, t, axial) for p, t in zip(labels, truths)])),
            "angle_error": float(np.mean(_fold(np.degrees(angles - true_angles), period))),
            "baseline_d_l1": float(np.mean([_label_l1(p, t, axial) for p, t in zip(baseline, truths)])),
            "baseline_d_theta": float(np.mean([_label_angle(p, t, axial) for p, t in zip(baseline, truths)])),
            "baseline_angle_error": float(np.mean(_fold(np.degrees(base_angles - true_angles), period))),
        }
    return result


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------


@dataclass
class SegmentationResult:
    instances: np.ndarray
    detections: List[Detection]
    metrics: Dict[str, float] = field(default_factory=dict)


def _paste(canvas: np.ndarray, mask: np.ndarray, center: Tuple[float, float], label: int) -> None:
    size = mask.shape[0]
    cx, cy = (int(round(v)) for v in center)
    top, left = cy - size // 2, cx - size // 2
    h, w = canvas.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + size, h), min(left + size, w)
    if y0 >= y1 or x0 >= x1:
        return
    region = canvas[y0:y1, x0:x1]
    m = mask[y0 - top:y1 - top, x0 - left:x1 - left] > 0.5
    region[m & (region == 0)] = label


def instance_metrics(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    """Mean per-true-instance DSC/IoU against the best-overlapping predicted instance."""
    ids = [i for i in np.unique(truth) if i != 0]
    dscs, ious = [], []
    for i in ids:
        t = truth == i
        overlap = pred[t]
        overlap = overlap[overlap != 0]
        if overlap.size == 0:
            dscs.append(0.0)
            ious.append(0.0)
            continue
        best = np.bincount(overlap).argmax()
        p = pred == best
        dscs.append(dice(p, t))
        ious.append(iou(p, t))
    sem_p, sem_t = pred > 0, truth > 0
    return {
        "instance_dice": float(np.mean(dscs)) if dscs else float("nan"),
        "instance_iou": float(np.mean(ious)) if ious else float("nan"),
        "semantic_dice": dice(sem_p, sem_t),
        "semantic_iou": iou(sem_p, sem_t),
        "instances": float(len(np.unique(pred)) - 1),
    }


def segment_few_shot(image: WholeImage, encoder: EncoderModel, mapper: MapperModel, bank: CellBank,
                     cfg: PipelineConfig = None, detections: Optional[Sequence[Detection]] = None) -> SegmentationResult:
    """Instance masks by per-cell mask transfer; overlaps go to the higher-scoring detection.

    Without ``detections`` the image is scanned first with :func:`scan_count`.
    Instance ``k`` (1-based) belongs to the ``k``-th detection in descending
    score order.
    """
    cfg = cfg or PipelineConfig()
    if detections is None:
        detections = scan_count(image, encoder, bank, cfg).detections
    if any(e.labels.mask() is None for e in bank.entries):
        raise ConfigError("segmentation needs binary-mask labels on every archetype")
    dets = sorted(detections, key=lambda d: (-d.score, d.center[0], d.center[1]))
    queries = [extract_patch(image, d.center, cfg.patch_size) for d in dets]
    transfers = match_and_transfer(queries, encoder, mapper, bank, cfg)
    canvas = np.zeros(image.shape, dtype=np.int32)
    for k, (d, t) in enumerate(zip(dets, transfers), start=1):
        _paste(canvas, t.labels.mask(), d.center, k)
    result = SegmentationResult(canvas, list(dets))
    if image.instances is not None:
        result.metrics = instance_metrics(canvas, np.asarray(image.instances))
    return result


# --------------------------------------------------------------------------
# Hard-example mining
# --------------------------------------------------------------------------


def hard_example_mining(n_items: int, rho: float, batch_size: int = 16, seed: int = 0,
                        hard_quantile: float = 0.25) -> HardExampleSampler:
    """A sampler drawing fraction ``rho`` of each batch from the highest recent-loss quantile.

    Feed losses back with ``sampler.update(indices, losses)``; the training
    functions accept the ratio directly through their ``hard_mining_ratio``.
    """
    return HardExampleSampler(n_items, rho, batch_size, seed, hard_quantile)

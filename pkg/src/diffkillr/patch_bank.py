"""Cell patches, their pixel-level labels, and the augmented archetype bank."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .diffeo_gen import (
    AugmentationConfig,
    DiffeoSpec,
    InterpPolicy,
    WarpField,
    make_warp,
    map_jacobian,
    sample_diffeo,
    warp_array,
)
from .errors import BoundsError, ConfigError, DimensionError, FormatError

BANK_FORMAT_VERSION = 1
LABEL_KINDS = ("binary_mask", "orientation_gradient", "generic_scalar")


def to_unit_range(array: np.ndarray) -> np.ndarray:
    """Scale integer images by their dtype maximum and clip to ``[0, 1]``."""
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.integer):
        out = array.astype(np.float32) / np.iinfo(array.dtype).max
    elif array.dtype == bool:
        out = array.astype(np.float32)
    else:
        out = array.astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def _as_hwc(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3:
        raise DimensionError(f"expected (H, W) or (H, W, C) image, got {array.shape}")
    return array


# --------------------------------------------------------------------------
# Patches and labels
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CellPatch:
    """Square ``(H, W, C)`` intensity patch with values in ``[0, 1]``."""

    intensities: np.ndarray
    source_id: str = ""
    center: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        arr = np.clip(_as_hwc(self.intensities).astype(np.float32), 0.0, 1.0)
        if arr.shape[0] != arr.shape[1]:
            raise DimensionError(f"patches must be square, got {arr.shape[:2]}")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def size(self) -> int:
        return self.intensities.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intensities.shape[:2]

    def gray(self) -> np.ndarray:
        return self.intensities.mean(axis=-1)

    def warped(self, field: WarpField, policy: Optional[InterpPolicy] = None) -> "CellPatch":
        out = warp_array(field, self.intensities, policy or InterpPolicy.for_images())
        return replace(self, intensities=out)

    def __eq__(self, other):
        if not isinstance(other, CellPatch):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.center == other.center
            and np.array_equal(self.intensities, other.intensities)
        )


@dataclass(frozen=True, eq=False)
class LabelChannel:
    name: str
    kind: str
    data: np.ndarray

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise ConfigError(f"unknown label kind {self.kind!r}")
        data = _as_hwc(self.data).astype(np.float32)
        if self.kind == "binary_mask":
            if data.shape[2] != 1 or not np.isin(data, (0.0, 1.0)).all():
                raise ValueError(f"channel {self.name!r}: binary masks must be single-channel 0/1")
        if self.kind == "orientation_gradient" and data.shape[2] != 2:
            raise DimensionError(f"channel {self.name!r}: orientation gradients need 2 components")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


class LabelStack:
    """Named, spatially aligned annotation channels of one patch.

    Orientation-gradient channels hold unit vectors on the foreground of the
    stack's first binary mask and zeros elsewhere.
    """

    def __init__(self, channels: Iterable[LabelChannel] = ()):
        self.channels: Tuple[LabelChannel, ...] = tuple(channels)
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate label channel names: {names}")
        shapes = {c.data.shape[:2] for c in self.channels}
        if len(shapes) > 1:
            raise DimensionError(f"label channels disagree in shape: {shapes}")
        mask = self.mask()
        for c in self.channels:
            if c.kind == "orientation_gradient" and mask is not None:
                norms = np.linalg.norm(c.data, axis=-1)[mask > 0]
                if norms.size and np.max(np.abs(norms - 1.0)) > 1e-3:
                    raise ValueError(f"channel {c.name!r}: vectors must be unit length on the foreground")

    @property
    def shape(self) -> Optional[Tuple[int, int]]:
        return self.channels[0].data.shape[:2] if self.channels else None

    def names(self) -> List[str]:
        return [c.name for c in self.channels]

    def __getitem__(self, name: str) -> LabelChannel:
        for c in self.channels:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names()

    def __len__(self):
        return len(self.channels)

    def __eq__(self, other):
        if not isinstance(other, LabelStack):
            return NotImplemented
        return len(self) == len(other) and all(
            a.name == b.name and a.kind == b.kind and np.array_equal(a.data, b.data)
            for a, b in zip(self.channels, other.channels)
        )

    def first(self, kind: str) -> Optional[LabelChannel]:
        return next((c for c in self.channels if c.kind == kind), None)

    def mask(self) -> Optional[np.ndarray]:
        c = self.first("binary_mask")
        return None if c is None else c.data[..., 0]

    def orientation(self) -> Optional[np.ndarray]:
        c = self.first("orientation_gradient")
        return None if c is None else c.data

    def warped(self, field: WarpField, policy: Optional[InterpPolicy] = None) -> "LabelStack":
        """Warp every channel; masks are re-binarized, orientation vectors renormalized."""
        policy = policy or InterpPolicy.for_labels()
        if self.shape is not None and tuple(self.shape) != tuple(field.shape):
            raise DimensionError(f"label shape {self.shape} does not match field {field.shape}")
        out = []
        new_mask = None
        for c in self.channels:
            data = warp_array(field, c.data, policy)
            if c.kind == "binary_mask":
                data = (data >= policy.mask_threshold).astype(np.float32)
                if new_mask is None:
                    new_mask = data[..., 0]
            out.append([c, data])
        for item in out:
            c, data = item
            if c.kind == "orientation_gradient":
                if policy.reorient:
                    data = _reorient(field, data)
                item[1] = _renormalize(data, new_mask, c.data)
        return LabelStack(LabelChannel(c.name, c.kind, d) for c, d in out)


def _reorient(field: WarpField, vectors: np.ndarray) -> np.ndarray:
    # Content moves by the inverse of p -> p + W(p); push vectors through its Jacobian.
    jac = map_jacobian(field)
    a, b, c, d = jac[..., 0, 0], jac[..., 0, 1], jac[..., 1, 0], jac[..., 1, 1]
    det = a * d - b * c
    det = np.where(np.abs(det) < 1e-9, 1e-9, det)
    vx, vy = vectors[..., 0], vectors[..., 1]
    return np.stack([(d * vx - b * vy) / det, (-c * vx + a * vy) / det], axis=-1)


def _renormalize(vectors: np.ndarray, mask: Optional[np.ndarray], reference: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    unit = np.where(norm > 1e-6, vectors / np.maximum(norm, 1e-12), 0.0)
    if mask is None:
        return unit.astype(np.float32)
    fg = mask > 0
    missing = fg & (norm[..., 0] <= 1e-6)
    if missing.any():
        mean = unit[fg & ~missing].sum(axis=0) if (fg & ~missing).any() else reference.reshape(-1, 2).sum(axis=0)
        n = np.linalg.norm(mean)
        unit[missing] = mean / n if n > 1e-9 else (1.0, 0.0)
    unit[~fg] = 0.0
    return unit.astype(np.float32)


def mask_labels(mask: np.ndarray, orientation: Optional[np.ndarray] = None) -> LabelStack:
    """Convenience constructor: a ``mask`` channel and optionally an ``orientation`` channel."""
    channels = [LabelChannel("mask", "binary_mask", (np.asarray(mask) > 0).astype(np.float32))]
    if orientation is not None:
        channels.append(LabelChannel("orientation", "orientation_gradient", orientation))
    return LabelStack(channels)


# --------------------------------------------------------------------------
# Whole images and patch extraction
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WholeImage:
    """An image to scan, optionally with ground-truth centroids ``(x, y)`` and instance labels."""

    intensities: np.ndarray
    centroids: Optional[np.ndarray] = None
    instances: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "intensities", to_unit_range(_as_hwc(self.intensities)))
        if self.centroids is not None:
            c = np.asarray(self.centroids, dtype=float).reshape(-1, 2)
            object.__setattr__(self, "centroids", c)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.intensities.shape[:2]


def extract_patch(image: WholeImage, center: Sequence[float], size: int, source_id: str = "") -> CellPatch:
    """``size`` x ``size`` crop whose pixel ``size // 2`` sits on ``center``; border-replicated."""
    h, w = image.shape
    cx, cy = (int(round(v)) for v in center)
    if not (0 <= cx < w and 0 <= cy < h):
        raise BoundsError(f"center {tuple(center)} outside {w}x{h} image")
    top, left = cy - size // 2, cx - size // 2
    pad = max(0, -top, -left, top + size - h, left + size - w)
    src = image.intensities
    if pad:
        src = np.pad(src, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    crop = src[top + pad: top + pad + size, left + pad: left + pad + size]
    return CellPatch(crop, source_id=source_id, center=(cx, cy))


def extract_labels(instances: np.ndarray, instance_id: int, center: Sequence[float], size: int) -> LabelStack:
    """Binary mask of one instance cropped like :func:`extract_patch` (zero padded)."""
    h, w = instances.shape[:2]
    cx, cy = (int(round(v)) for v in center)
    top, left = cy - size // 2, cx - size // 2
    mask = np.zeros((size, size), dtype=np.float32)
    ys, xs = slice(max(top, 0), min(top + size, h)), slice(max(left, 0), min(left + size, w))
    mask[ys.start - top: ys.stop - top, xs.start - left: xs.stop - left] = instances[ys, xs] == instance_id
    return mask_labels(mask)


def sample_background(
    image: WholeImage, size: int, count: int, seed: int, centroids: Optional[np.ndarray] = None
) -> List[CellPatch]:
    """Patches whose centres lie farther than ``size`` from every centroid."""
    centroids = image.centroids if centroids is None else np.asarray(centroids, float).reshape(-1, 2)
    h, w = image.shape
    ys, xs = np.mgrid[size // 2: h - size // 2 + 1, size // 2: w - size // 2 + 1]
    cand = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    if centroids is not None and len(centroids):
        d = np.min(np.linalg.norm(cand[:, None, :] - centroids[None, :, :], axis=-1), axis=1)
        cand = cand[d > size]
    if len(cand) == 0:
        return []
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(cand), size=min(count, len(cand)), replace=False)
    return [extract_patch(image, cand[k], size, source_id=f"background:{k}") for k in np.sort(pick)]


# --------------------------------------------------------------------------
# The bank
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BankEntry:
    patch: CellPatch
    labels: LabelStack


@dataclass(frozen=True)
class AugmentedRecord:
    """``T_{g_i}{s_j}``: archetype ``entry`` warped by the ``index``-th sampled spec."""

    entry: int
    index: int
    spec: DiffeoSpec
    patch: CellPatch
    labels: LabelStack


@dataclass
class CellBank:
    """Annotated archetypes, their augmentations and cached embeddings.

    ``augmented`` is ordered archetype-major: record ``k`` has
    ``entry == k // m`` and ``index == k % m``.  ``embeddings`` (when present)
    has one row per augmented record; ``background_embeddings`` one row per
    background patch.
    """

    entries: List[BankEntry]
    augmentations_per_entry: int = 0
    augmented: List[AugmentedRecord] = field(default_factory=list)
    embeddings: Optional[np.ndarray] = None
    background: List[CellPatch] = field(default_factory=list)
    background_embeddings: Optional[np.ndarray] = None
    seed: Optional[int] = None
    config: Optional[AugmentationConfig] = None

    def __post_init__(self):
        for r in self.augmented:
            src = self.entries[r.entry]
            if r.patch.shape != src.patch.shape or r.labels.shape != src.labels.shape:
                raise DimensionError("augmented record shape differs from its entry")
        if self.embeddings is not None and len(self.embeddings) != len(self.augmented):
            raise DimensionError("embedding count must equal augmented record count")

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def patch_size(self) -> int:
        return self.entries[0].patch.size

    def specs(self) -> List[DiffeoSpec]:
        """The finite set of sampled diffeomorphisms the bank was built from."""
        return [r.spec for r in self.augmented]

    def record(self, i: int, j: int) -> AugmentedRecord:
        return self.augmented[j * self.augmentations_per_entry + i]

    def records(self) -> List[AugmentedRecord]:
        """Augmented records, or the plain entries as identity records when none were built."""
        if self.augmented:
            return self.augmented
        c = (self.patch_size - 1) / 2.0
        ident = DiffeoSpec("rotation", (c, c))
        return [AugmentedRecord(j, 0, ident, e.patch, e.labels) for j, e in enumerate(self.entries)]

    def with_embeddings(self, embeddings: np.ndarray, background: Optional[np.ndarray] = None) -> "CellBank":
        return replace(self, embeddings=np.asarray(embeddings, np.float32),
                       background_embeddings=None if background is None else np.asarray(background, np.float32))

    def check_record(self, k: int, atol: float = 1e-6) -> bool:
        """Recompute record ``k`` from its stored spec and compare."""
        r = self.augmented[k]
        src = self.entries[r.entry]
        f = make_warp(r.spec, *src.patch.shape)
        return (
            np.allclose(src.patch.warped(f).intensities, r.patch.intensities, atol=atol)
            and src.labels.warped(f) == r.labels
        )


def build_augmented_bank(
    bank: CellBank, m: int, config: Optional[AugmentationConfig] = None, seed: int = 0
) -> CellBank:
    """Warp every archetype by ``m`` sampled diffeomorphisms (patch and labels alike)."""
    if not bank.entries:
        raise ConfigError("cannot augment an empty bank")
    if m < 1:
        raise ConfigError("m must be >= 1")
    config = config or AugmentationConfig()
    rng = np.random.default_rng(seed)
    records = []
    for j, e in enumerate(bank.entries):
        for i in range(m):
            spec = sample_diffeo(rng, config, size=e.patch.size)
            f = make_warp(spec, *e.patch.shape)
            records.append(AugmentedRecord(j, i, spec, e.patch.warped(f), e.labels.warped(f)))
    return CellBank(
        entries=list(bank.entries), augmentations_per_entry=m, augmented=records,
        background=list(bank.background), seed=seed, config=config,
    )


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def _save_labels(path: Path, labels: LabelStack) -> List[dict]:
    np.savez(path, **{f"c{k}": c.data for k, c in enumerate(labels.channels)})
    return [{"name": c.name, "kind": c.kind} for c in labels.channels]


def _load_labels(path: Path, meta: List[dict]) -> LabelStack:
    with np.load(path) as z:
        return LabelStack(LabelChannel(m["name"], m["kind"], z[f"c{k}"]) for k, m in enumerate(meta))


def save_bank(bank: CellBank, path: Union[str, Path]) -> None:
    """Write the bank as a directory: ``manifest.json`` plus one ``.npy``/``.npz`` pair per record."""
    root = Path(path)
    (root / "records").mkdir(parents=True, exist_ok=True)

    def put(stem: str, patch: CellPatch, labels: Optional[LabelStack]) -> dict:
        np.save(root / "records" / f"{stem}.npy", patch.intensities.astype(np.float32))
        item = {"image": f"records/{stem}.npy", "source_id": patch.source_id, "center": list(patch.center)}
        if labels is not None:
            item["labels"] = f"records/{stem}_labels.npz"
            item["channels"] = _save_labels(root / item["labels"], labels)
        return item

    manifest = {
        "format_version": BANK_FORMAT_VERSION,
        "augmentations_per_entry": bank.augmentations_per_entry,
        "seed": bank.seed,
        "config": None if bank.config is None else bank.config.to_dict(),
        "entries": [put(f"entry_{j:04d}", e.patch, e.labels) for j, e in enumerate(bank.entries)],
        "augmented": [
            dict(put(f"aug_{r.entry:04d}_{r.index:04d}", r.patch, r.labels),
                 entry=r.entry, index=r.index, spec=r.spec.to_dict())
            for r in bank.augmented
        ],
        "background": [put(f"bg_{k:04d}", p, None) for k, p in enumerate(bank.background)],
    }
    for key, arr in (("embeddings", bank.embeddings), ("background_embeddings", bank.background_embeddings)):
        if arr is not None:
            np.save(root / f"{key}.npy", np.asarray(arr, np.float32))
            manifest[key] = f"{key}.npy"
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bank(path: Union[str, Path]) -> CellBank:
    root = Path(path)
    mfile = root / "manifest.json"
    if not mfile.exists():
        raise FormatError(f"no manifest in {root}")
    try:
        manifest = json.loads(mfile.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupted manifest: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format_version") != BANK_FORMAT_VERSION:
        raise FormatError(f"unsupported bank format version {manifest.get('format_version') if isinstance(manifest, dict) else None}")

    def get(item, with_labels=True):
        patch = CellPatch(np.load(root / item["image"]), item["source_id"], tuple(item["center"]))
        if not with_labels:
            return patch
        return patch, _load_labels(root / item["labels"], item["channels"])

    try:
        entries = [BankEntry(*get(it)) for it in manifest["entries"]]
        augmented = [
            AugmentedRecord(it["entry"], it["index"], DiffeoSpec.from_dict(it["spec"]), *get(it))
            for it in manifest["augmented"]
        ]
        background = [get(it, False) for it in manifest["background"]]
        emb = {k: np.load(root / manifest[k]) if k in manifest else None
               for k in ("embeddings", "background_embeddings")}
        config = manifest.get("config")
        return CellBank(
            entries=entries, augmentations_per_entry=manifest["augmentations_per_entry"], augmented=augmented,
            embeddings=emb["embeddings"], background=background, background_embeddings=emb["background_embeddings"],
            seed=manifest.get("seed"), config=None if config is None else AugmentationConfig.from_dict(config),
        )
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise FormatError(f"bank at {root} is incomplete or corrupted: {exc!r}") from None


# --------------------------------------------------------------------------
# Image and centroid files
# --------------------------------------------------------------------------


def read_image(path: Union[str, Path]) -> np.ndarray:
    """PNG/TIFF (or ``.npy``) to a float ``(H, W, C)`` array in ``[0, 1]``."""
    path = Path(path)
    if path.suffix == ".npy":
        return to_unit_range(_as_hwc(np.load(path)))
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    return to_unit_range(_as_hwc(arr))


def write_image(path: Union[str, Path], array: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(array)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(path)


def read_centroids(path: Union[str, Path]) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: centroid CSV needs an 'x,y' header")
        rows = [(float(r["x"]), float(r["y"])) for r in reader]
    return np.asarray(rows, dtype=float).reshape(-1, 2)


def write_centroids(path: Union[str, Path], centroids: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for x, y in np.asarray(centroids).reshape(-1, 2):
            w.writerow([f"{x:g}", f"{y:g}"])


def select_archetypes(n_cells: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded random subset of ``ceil(fraction * n_cells)`` cell indices, sorted."""
    k = max(1, int(math.ceil(fraction * n_cells)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_cells, size=min(k, n_cells), replace=False))

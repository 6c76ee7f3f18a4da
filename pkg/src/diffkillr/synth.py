"""Synthetic cells with ground-truth warps, and the evaluation metrics.

Shapes are rasterized with 4x4 supersampling so mask areas and overlap
metrics do not jitter with sub-pixel placement.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .diffeo_gen import AugmentationConfig, DiffeoSpec, InterpPolicy, WarpField, invert, make_warp, sample_diffeo
from .errors import DimensionError, ParameterError
from .patch_bank import CellPatch, LabelChannel, LabelStack, WholeImage

SHAPE_KINDS = ("square", "ellipse", "star")
_SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeSpec:
    """A synthetic cell.

    ``a`` is the square side, the ellipse semi-major axis or the star's outer
    radius; ``b`` is the ellipse semi-minor axis or the star's inner radius.
    ``angle`` rotates the shape (radians, counter-clockwise in image
    coordinates, i.e. towards +y).  ``texture`` is the amplitude of a smooth
    random intensity pattern inside the shape, drawn from the ``seed`` given
    to :func:`gen_shape`.
    """

    kind: str = "ellipse"
    a: float = 9.0
    b: float = 5.0
    angle: float = 0.0
    points: int = 5
    foreground: float = 0.8
    background: float = 0.1
    texture: float = 0.0
    offset: Tuple[float, float] = (0.0, 0.0)

    def radius(self) -> float:
        """Radius of the smallest centred disc containing the shape."""
        if self.kind == "square":
            return self.a / math.sqrt(2.0)
        return max(self.a, self.b) if self.kind == "ellipse" else self.a

    def validate(self, size: int) -> None:
        if self.kind not in SHAPE_KINDS:
            raise ParameterError(f"unknown shape kind {self.kind!r}")
        if self.a <= 0 or (self.kind != "square" and self.b <= 0):
            raise ParameterError("shape sizes must be positive")
        if self.kind == "star" and (self.points < 3 or self.b >= self.a):
            raise ParameterError("stars need >= 3 points and inner radius < outer radius")
        reach = self.radius() + max(abs(self.offset[0]), abs(self.offset[1]))
        if reach > size / 2.0 - 2.0:
            raise ParameterError(f"shape of reach {reach:.1f} px does not fit a {size} px patch with 2 px margin")


@dataclass(frozen=True)
class EvalPair:
    """A fixed cell, the same cell warped by ``field`` and both ground-truth fields.

    ``moving = apply_warp(field, fixed)``.  A registration of ``moving`` onto
    ``fixed`` should predict ``inverse`` as its forward field and ``field`` as
    its inverse field.
    """

    fixed: CellPatch
    fixed_labels: LabelStack
    moving: CellPatch
    moving_labels: LabelStack
    field: WarpField
    inverse: WarpField
    spec: DiffeoSpec

    @property
    def gt_forward(self) -> WarpField:
        return self.inverse

    @property
    def gt_inverse(self) -> WarpField:
        return self.field


def _coverage(spec: ShapeSpec, size: int) -> np.ndarray:
    n = _SUPERSAMPLE
    offs = (np.arange(n) + 0.5) / n - 0.5
    y, x = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2.0
    cx, cy = c + spec.offset[0], c + spec.offset[1]
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    cov = np.zeros((size, size))
    for oy in offs:
        for ox in offs:
            px, py = x + ox - cx, y + oy - cy
            u = ca * px + sa * py
            v = -sa * px + ca * py
            if spec.kind == "square":
                inside = (np.abs(u) <= spec.a / 2) & (np.abs(v) <= spec.a / 2)
            elif spec.kind == "ellipse":
                inside = (u / spec.a) ** 2 + (v / spec.b) ** 2 <= 1.0
            else:
                r = np.hypot(u, v)
                t = np.mod(np.arctan2(v, u), 2 * math.pi / spec.points) / (2 * math.pi / spec.points)
                # Piecewise-linear star boundary between outer tips and inner notches.
                edge = spec.a + (spec.b - spec.a) * (1.0 - np.abs(2.0 * t - 1.0))
                inside = r <= edge
            cov += inside
    return cov / (n * n)


def gen_shape(spec: ShapeSpec, size: int = 32, seed: int = 0) -> Tuple[CellPatch, LabelStack]:
    """Rasterize one synthetic cell.

    The label stack holds a ``mask`` channel and, for non-circular ellipses,
    an ``orientation`` channel of unit vectors along the major axis.
    """
    spec.validate(size)
    cov = _coverage(spec, size)
    img = spec.background + (spec.foreground - spec.background) * cov
    if spec.texture:
        rng = np.random.default_rng(seed)
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
        tex /= np.abs(tex).max() + 1e-12
        img = img + spec.texture * tex * cov
    mask = (cov >= 0.5).astype(np.float32)
    channels = [LabelChannel("mask", "binary_mask", mask)]
    if spec.kind == "ellipse" and not math.isclose(spec.a, spec.b):
        axis = spec.angle if spec.a > spec.b else spec.angle + math.pi / 2
        vec = np.zeros((size, size, 2), np.float32)
        vec[mask > 0] = (math.cos(axis), math.sin(axis))
        channels.append(LabelChannel("orientation", "orientation_gradient", vec))
    patch = CellPatch(np.clip(img, 0.0, 1.0)[..., None], source_id=f"synth:{spec.kind}:{seed}",
                      center=((size - 1) / 2.0, (size - 1) / 2.0))
    return patch, LabelStack(channels)


def gen_pair(shape: ShapeSpec, diffeo: DiffeoSpec, seed: int = 0, size: int = 32,
             reorient: bool = True) -> EvalPair:
    """Fixed cell plus its warped copy under ``diffeo``, with both ground-truth fields."""
    fixed, labels = gen_shape(shape, size, seed)
    f = make_warp(diffeo, size, size)
    moving = fixed.warped(f)
    moving_labels = labels.warped(f, InterpPolicy.for_labels(reorient=reorient))
    return EvalPair(fixed, labels, moving, moving_labels, f, invert(f, margin=2), diffeo)


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def _field_array(w: Union[WarpField, np.ndarray]) -> np.ndarray:
    return w.displacement if isinstance(w, WarpField) else np.asarray(w, dtype=float)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na < 1e-12 or nb < 1e-12:
        # Constant component: correlation undefined, score agreement instead.
        return 1.0 if (na < 1e-12 and nb < 1e-12) else 0.0
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def ncc_field(wa, wb, mask: Optional[np.ndarray] = None) -> float:
    """Zero-mean normalized cross-correlation, per displacement component, averaged."""
    a, b = _field_array(wa), _field_array(wb)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    sel = slice(None) if mask is None else np.asarray(mask, bool)
    return float(np.mean([_ncc(a[..., k][sel].ravel(), b[..., k][sel].ravel()) for k in range(2)]))


def l1_field(wa, wb) -> float:
    a, b = _field_array(wa), _field_array(wb)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def _image(x) -> np.ndarray:
    return x.intensities if isinstance(x, CellPatch) else np.asarray(x, dtype=float)


def l1_image(a, b) -> float:
    a, b = _image(a), _image(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a.astype(float) - b.astype(float))))


def _masks(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a > 0.5, b > 0.5


def _empty_overlap(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if a.any() or b.any():
        return None if (a.any() and b.any()) else 0.0
    warnings.warn("both masks are empty; overlap defined as 1", RuntimeWarning, stacklevel=3)
    return 1.0


def dice(mask_a, mask_b) -> float:
    a, b = _masks(mask_a, mask_b)
    special = _empty_overlap(a, b)
    if special is not None:
        if special == 0.0:
            warnings.warn("one mask is empty; dice is 0", RuntimeWarning, stacklevel=2)
        return special
    return float(2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum()))


def iou(mask_a, mask_b) -> float:
    a, b = _masks(mask_a, mask_b)
    special = _empty_overlap(a, b)
    if special is not None:
        if special == 0.0:
            warnings.warn("one mask is empty; iou is 0", RuntimeWarning, stacklevel=2)
        return special
    return float(np.logical_and(a, b).sum() / np.logical_or(a, b).sum())


def angles_between(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    """Unsigned angle in degrees between corresponding 2-D vectors."""
    va, vb = np.asarray(va, float), np.asarray(vb, float)
    cross = va[..., 0] * vb[..., 1] - va[..., 1] * vb[..., 0]
    dot = (va * vb).sum(axis=-1)
    return np.degrees(np.abs(np.arctan2(cross, dot)))


def angular_error(label_a, label_b, mask_a=None, mask_b=None, axial: bool = False) -> float:
    """Mean angle in degrees (within [0, 180]) between two orientation fields.

    Averaged over the intersection of the two foregrounds; a foreground
    defaults to the pixels with a nonzero vector.  ``axial`` treats ``v`` and
    ``-v`` as the same orientation, so errors fall in [0, 90].
    """
    a, b = np.asarray(label_a, float), np.asarray(label_b, float)
    if a.shape != b.shape or a.shape[-1] != 2:
        raise DimensionError(f"orientation fields must match and be (..., 2): {a.shape} vs {b.shape}")
    fa = np.linalg.norm(a, axis=-1) > 1e-6 if mask_a is None else np.asarray(mask_a) > 0.5
    fb = np.linalg.norm(b, axis=-1) > 1e-6 if mask_b is None else np.asarray(mask_b) > 0.5
    both = fa & fb
    if not both.any():
        warnings.warn("orientation foregrounds do not intersect", RuntimeWarning, stacklevel=2)
        return float("nan")
    ang = angles_between(a[both], b[both])
    if axial:
        ang = np.minimum(ang, 180.0 - ang)
    return float(np.mean(ang))


def mean_direction(vectors: np.ndarray, mask: Optional[np.ndarray] = None, axial: bool = False) -> float:
    """Circular mean angle (radians) of the foreground vectors.

    With ``axial`` the mean is taken over doubled angles and lies in (-pi/2, pi/2].
    """
    v = np.asarray(vectors, float).reshape(-1, 2)
    if mask is not None:
        v = v[np.asarray(mask).ravel() > 0.5]
    v = v[np.linalg.norm(v, axis=-1) > 1e-6]
    if len(v) == 0:
        return float("nan")
    if axial:
        t = 2.0 * np.arctan2(v[:, 1], v[:, 0])
        return float(math.atan2(np.sin(t).sum(), np.cos(t).sum()) / 2.0)
    s = v.sum(axis=0)
    return float(math.atan2(s[1], s[0]))


def rotate_vectors(vectors: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    v = np.asarray(vectors, float)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def centroid(mask: np.ndarray) -> Tuple[float, float]:
    """``(x, y)`` centre of mass of a binary mask."""
    ys, xs = np.nonzero(np.asarray(mask) > 0.5)
    return float(xs.mean()), float(ys.mean())


def default_archetypes(n: int = 4):
    """Distinct synthetic archetypes that no realistic diffeomorphism maps onto each other."""
    base = [
        ShapeSpec("square", a=13.0, foreground=0.85, texture=0.08),
        ShapeSpec("ellipse", a=11.0, b=4.5, foreground=0.7, texture=0.08),
        ShapeSpec("star", a=11.0, b=5.0, points=5, foreground=0.95, texture=0.08),
        ShapeSpec("star", a=11.0, b=7.0, points=8, foreground=0.55, texture=0.08),
        ShapeSpec("ellipse", a=8.0, b=8.0, foreground=0.45, texture=0.08),
        ShapeSpec("star", a=11.0, b=4.0, points=3, foreground=0.75, texture=0.08),
    ]
    if n > len(base):
        raise ParameterError(f"at most {len(base)} default archetypes")
    return base[:n]


# --------------------------------------------------------------------------
# Scenes
# --------------------------------------------------------------------------


@dataclass
class Scene:
    image: WholeImage
    archetypes: List[int]
    specs: List[DiffeoSpec]


def _scatter(rng: np.random.Generator, n: int, extent: int, margin: float, spacing: float,
             attempts: int = 20000) -> np.ndarray:
    pts: List[np.ndarray] = []
    for _ in range(attempts):
        p = rng.uniform(margin, extent - 1 - margin, size=2)
        if all(np.hypot(*(p - q)) >= spacing for q in pts):
            pts.append(p)
            if len(pts) == n:
                return np.round(np.array(pts))
    raise ParameterError(f"cannot place {n} cells {spacing:.0f} px apart in a {extent} px scene")


def gen_scene(shapes: Sequence[ShapeSpec], n: int = 9, layout: str = "grid", seed: int = 0, size: int = 32,
              spacing: float = 1.5, extent: Optional[int] = None, config: Optional[AugmentationConfig] = None,
              noise: float = 0.0) -> Scene:
    """A whole image of ``n`` randomly deformed cells with centroid and instance ground truth.

    ``layout="grid"`` puts the cells on a square grid with a pitch of two
    patches; ``"random"`` scatters them at least ``spacing`` patches apart.
    Cells cycle through ``shapes``; each gets its own draw from ``config``.
    """
    if layout not in ("grid", "random"):
        raise ParameterError(f"unknown layout {layout!r}")
    rng = np.random.default_rng(seed)
    config = config or AugmentationConfig(patch_size=size)
    if layout == "grid":
        side = math.ceil(math.sqrt(n))
        pitch = 2 * size
        extent = extent or side * pitch
        centers = np.array([(pitch // 2 + pitch * (k % side), pitch // 2 + pitch * (k // side)) for k in range(n)], float)
    else:
        extent = extent or int(math.ceil(spacing * size * math.sqrt(n) * 1.6))
        centers = _scatter(rng, n, extent, size / 2, spacing * size)
    bg = shapes[0].background
    img = np.full((extent, extent), bg, np.float64)
    inst = np.zeros((extent, extent), np.int32)
    cents, kinds, specs = [], [], []
    for k, (cx, cy) in enumerate(centers.astype(int)):
        a = k % len(shapes)
        patch, labels = gen_shape(shapes[a], size, seed=int(rng.integers(2**31)))
        spec = sample_diffeo(rng, config, size)
        f = make_warp(spec, size, size)
        patch, labels = patch.warped(f), labels.warped(f, InterpPolicy.for_labels())
        top, left = cy - size // 2, cx - size // 2
        ys, xs = slice(max(top, 0), min(top + size, extent)), slice(max(left, 0), min(left + size, extent))
        sub = (slice(ys.start - top, ys.stop - top), slice(xs.start - left, xs.stop - left))
        img[ys, xs] = patch.intensities[..., 0][sub]
        m = labels.mask()[sub] > 0.5
        inst[ys, xs][m] = k + 1
        my, mx = np.nonzero(inst == k + 1)
        cents.append((mx.mean(), my.mean()))
        kinds.append(a)
        specs.append(spec)
    if noise:
        img = img + noise * rng.standard_normal(img.shape)
    image = WholeImage(np.clip(img, 0.0, 1.0), np.array(cents), inst)
    return Scene(image, kinds, specs)

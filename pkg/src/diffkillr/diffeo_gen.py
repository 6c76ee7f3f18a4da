"""Dense warping fields and the five realistic diffeomorphisms used for augmentation.

Fields follow the pull-back convention: a field ``W`` of shape ``(H, W, 2)``
holds one ``(dx, dy)`` vector per output pixel and warping samples the input at
``p + W(p)``.  ``x`` is the column coordinate, ``y`` the row coordinate, both in
pixels.  The map ``p -> p + W(p)`` is what :func:`jacobian_det` differentiates.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, FormatError, ParameterError

KINDS = (
    "rotation",
    "uniform_stretch",
    "directional_stretch",
    "volume_preserving_stretch",
    "partial_stretch",
)

# Hard limits accepted by make_warp; sampling ranges live in AugmentationConfig.
STRETCH_LIMITS = (0.25, 4.0)

_WARP_MAGIC = b"WARP"
_WARP_VERSION = 1


# --------------------------------------------------------------------------
# Types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InterpPolicy:
    """How a field resamples an array.

    ``padding`` is ``"border"`` (replicate edge pixels) or ``"zeros"``.
    Binary masks are resampled with ``interpolation`` and re-binarized at
    ``mask_threshold``.  ``reorient`` rotates orientation vectors by the local
    inverse Jacobian instead of resampling them as plain scalars.
    """

    interpolation: str = "bilinear"
    padding: str = "border"
    mask_threshold: float = 0.5
    reorient: bool = False

    def __post_init__(self):
        if self.interpolation not in ("bilinear", "nearest"):
            raise ParameterError(f"unknown interpolation {self.interpolation!r}")
        if self.padding not in ("border", "zeros"):
            raise ParameterError(f"unknown padding {self.padding!r}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ParameterError("mask_threshold must lie strictly between 0 and 1")

    @classmethod
    def for_images(cls) -> "InterpPolicy":
        return cls(padding="border")

    @classmethod
    def for_labels(cls, reorient: bool = True) -> "InterpPolicy":
        return cls(padding="zeros", reorient=reorient)


@dataclass(frozen=True)
class DiffeoSpec:
    """Symbolic parameterization of one realistic diffeomorphism.

    Parameters not used by ``kind`` keep their defaults.  ``direction`` is the
    unit stretch axis ``(ux, uy)``.  ``partial_stretch`` stretches by
    ``factor`` along ``direction`` inside a disc of ``radius`` around
    ``region_center``, blending to identity over ``blend_width`` pixels.
    """

    kind: str
    center: Tuple[float, float]
    angle: float = 0.0
    factor: float = 1.0
    direction: Tuple[float, float] = (1.0, 0.0)
    region_center: Optional[Tuple[float, float]] = None
    radius: float = 0.0
    blend_width: float = 0.0

    def validate(self, stretch_range: Tuple[float, float] = STRETCH_LIMITS) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown diffeomorphism kind {self.kind!r}")
        s_min, s_max = stretch_range
        if not 0.0 < s_min <= 1.0 <= s_max:
            raise ParameterError(f"illegal stretch range {stretch_range}")
        if not all(math.isfinite(v) for v in (*self.center, self.angle, self.factor)):
            raise ParameterError("non-finite parameter")
        if not -math.pi < self.angle <= math.pi:
            raise ParameterError(f"rotation angle {self.angle} outside (-pi, pi]")
        if not s_min <= self.factor <= s_max:
            raise ParameterError(f"stretch factor {self.factor} outside [{s_min}, {s_max}]")
        if self.kind in ("directional_stretch", "volume_preserving_stretch", "partial_stretch"):
            if abs(math.hypot(*self.direction) - 1.0) > 1e-6:
                raise ParameterError("direction must be a unit vector")
        if self.kind == "partial_stretch":
            if self.region_center is None or self.radius <= 0 or self.blend_width <= 0:
                raise ParameterError("partial_stretch needs region_center, radius > 0 and blend_width > 0")
            if self.factor > 1.0:
                # det = 1 + (s-1)(w + rho w') at worst; keep it positive.
                rho = np.linspace(self.radius, self.radius + self.blend_width, 2001)
                w, dw = _cosine_ramp(rho, self.radius, self.blend_width)
                if 1.0 + (self.factor - 1.0) * np.min(w + rho * dw) <= 0.0:
                    raise ParameterError("blend_width too small for this factor: map would fold")

    def inverse(self) -> "DiffeoSpec":
        """Closed-form inverse for the four global kinds."""
        if self.kind == "rotation":
            angle = -self.angle if self.angle != math.pi else math.pi
            return DiffeoSpec("rotation", self.center, angle=angle)
        if self.kind in ("uniform_stretch", "directional_stretch", "volume_preserving_stretch"):
            return DiffeoSpec(self.kind, self.center, factor=1.0 / self.factor, direction=self.direction)
        raise ParameterError("partial_stretch has no closed-form inverse; use invert()")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DiffeoSpec":
        d = dict(d)
        for key in ("center", "direction", "region_center"):
            if d.get(key) is not None:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class WarpField:
    """Dense displacement grid of shape ``(height, width, 2)`` in pixels."""

    displacement: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.displacement, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise DimensionError(f"displacement must be (H, W, 2), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ParameterError("displacement contains non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "displacement", d)

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def width(self) -> int:
        return self.displacement.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.displacement.shape[:2]

    @classmethod
    def zeros(cls, height: int, width: int) -> "WarpField":
        return cls(np.zeros((height, width, 2)))

    def __neg__(self) -> "WarpField":
        return WarpField(-self.displacement)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.displacement[..., 0], self.displacement[..., 1])

    def __eq__(self, other):
        if not isinstance(other, WarpField):
            return NotImplemented
        return np.array_equal(self.displacement, other.displacement)


@dataclass
class AugmentationConfig:
    """Kind weights and parameter ranges for :func:`sample_diffeo`."""

    kinds: Mapping[str, float] = field(default_factory=lambda: {k: 1.0 for k in KINDS})
    angle_range: Tuple[float, float] = (-math.pi, math.pi)
    stretch_range: Tuple[float, float] = (0.7, 1.4)
    radius_fraction: Tuple[float, float] = (0.25, 0.5)
    blend_fraction: float = 1.0
    patch_size: int = 32

    def __post_init__(self):
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown diffeomorphism kinds: {sorted(unknown)}")
        self.angle_range = tuple(float(v) for v in self.angle_range)
        self.stretch_range = tuple(float(v) for v in self.stretch_range)
        self.radius_fraction = tuple(float(v) for v in self.radius_fraction)
        s_min, s_max = self.stretch_range
        if not 0.0 < s_min <= 1.0 <= s_max:
            raise ConfigError(f"illegal stretch range {self.stretch_range}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "AugmentationConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kinds"] = dict(self.kinds)
        return d


# --------------------------------------------------------------------------
# Grid helpers
# --------------------------------------------------------------------------


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(x, y)`` coordinate arrays of shape ``(height, width)``."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    return x, y


def interior_mask(shape: Tuple[int, int], margin: Optional[int] = None) -> np.ndarray:
    """Boolean mask excluding a border of ``margin`` pixels (default: a quarter of the short side)."""
    h, w = shape
    if margin is None:
        margin = min(h, w) // 4
    m = np.zeros((h, w), dtype=bool)
    m[margin:h - margin, margin:w - margin] = True
    return m


def _check_same_shape(a: Tuple[int, int], b: Tuple[int, int]) -> None:
    if tuple(a) != tuple(b):
        raise DimensionError(f"shape mismatch: {tuple(a)} vs {tuple(b)}")


def _sample(array: np.ndarray, x: np.ndarray, y: np.ndarray, order: int = 1, padding: str = "border") -> np.ndarray:
    """Sample a 2-D array at fractional pixel coordinates."""
    mode = "nearest" if padding == "border" else "grid-constant"
    return ndimage.map_coordinates(array, [y, x], order=order, mode=mode, cval=0.0, prefilter=False)


def _sample_field(disp: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.stack([_sample(disp[..., k], x, y) for k in range(2)], axis=-1)


def _cosine_ramp(rho: np.ndarray, radius: float, width: float) -> Tuple[np.ndarray, np.ndarray]:
    """Weight 1 inside ``radius``, cosine fall-off to 0 over ``width``; also its derivative."""
    t = np.clip((rho - radius) / width, 0.0, 1.0)
    w = 0.5 * (1.0 + np.cos(np.pi * t))
    inside = (rho > radius) & (rho < radius + width)
    dw = np.where(inside, -0.5 * np.pi / width * np.sin(np.pi * t), 0.0)
    return w, dw


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


def make_warp(spec: DiffeoSpec, height: int, width: int) -> WarpField:
    """Closed-form displacement field realizing ``spec`` about ``spec.center``."""
    if height < 2 or width < 2:
        raise ParameterError("height and width must be >= 2")
    spec.validate()
    x, y = pixel_grid(height, width)
    cx, cy = spec.center
    qx, qy = x - cx, y - cy
    s = spec.factor
    ux, uy = spec.direction

    if spec.kind == "rotation":
        c, sn = math.cos(spec.angle), math.sin(spec.angle)
        mx, my = c * qx - sn * qy, sn * qx + c * qy
    elif spec.kind == "uniform_stretch":
        mx, my = s * qx, s * qy
    elif spec.kind in ("directional_stretch", "volume_preserving_stretch"):
        ortho = 1.0 / s if spec.kind == "volume_preserving_stretch" else 1.0
        along = ux * qx + uy * qy
        across = -uy * qx + ux * qy
        mx = s * along * ux - ortho * across * uy
        my = s * along * uy + ortho * across * ux
    else:  # partial_stretch
        rx, ry = spec.region_center
        px, py = x - rx, y - ry
        w, _ = _cosine_ramp(np.hypot(px, py), spec.radius, spec.blend_width)
        along = ux * px + uy * py
        dx = w * (s - 1.0) * along * ux
        dy = w * (s - 1.0) * along * uy
        return WarpField(np.stack([dx, dy], axis=-1))

    return WarpField(np.stack([mx - qx, my - qy], axis=-1))


def warp_array(field: WarpField, array: np.ndarray, policy: InterpPolicy = InterpPolicy()) -> np.ndarray:
    """Resample an ``(H, W)`` or ``(H, W, C)`` array through ``field``."""
    array = np.asarray(array)
    _check_same_shape(field.shape, array.shape[:2])
    x, y = pixel_grid(field.height, field.width)
    sx = x + field.displacement[..., 0]
    sy = y + field.displacement[..., 1]
    order = 1 if policy.interpolation == "bilinear" else 0
    src = array.astype(np.float64)
    if src.ndim == 2:
        out = _sample(src, sx, sy, order, policy.padding)
    else:
        out = np.stack([_sample(src[..., c], sx, sy, order, policy.padding) for c in range(src.shape[2])], axis=-1)
    return out


def apply_warp(field: WarpField, patch, policy: Optional[InterpPolicy] = None):
    """Warp an array, a :class:`~diffkillr.patch_bank.CellPatch` or a
    :class:`~diffkillr.patch_bank.LabelStack` through ``field``.

    Plain arrays and patches default to border-replicate padding, label stacks
    to zero padding.
    """
    if hasattr(patch, "warped"):
        return patch.warped(field, policy)
    return warp_array(field, patch, policy or InterpPolicy.for_images())


def compose(outer: WarpField, inner: WarpField) -> WarpField:
    """Compose two fields: ``outer(p) + inner(p + outer(p))``.

    The result samples through ``outer`` first and then ``inner``, so
    ``apply_warp(compose(a, b), x) ~= apply_warp(a, apply_warp(b, x))``.
    """
    _check_same_shape(outer.shape, inner.shape)
    x, y = pixel_grid(*outer.shape)
    d = outer.displacement
    moved = _sample_field(inner.displacement, x + d[..., 0], y + d[..., 1])
    return WarpField(d + moved)


def map_jacobian(field: WarpField) -> np.ndarray:
    """Per-pixel Jacobian ``(H, W, 2, 2)`` of ``p -> p + W(p)``; rows are (x, y) outputs."""
    d = field.displacement
    jac = np.empty(field.shape + (2, 2))
    for k in range(2):
        gy, gx = np.gradient(d[..., k])
        jac[..., k, 0] = gx + (k == 0)
        jac[..., k, 1] = gy + (k == 1)
    return jac


def jacobian_det(field: WarpField) -> np.ndarray:
    """Central-difference Jacobian determinant at interior pixels, shape ``(H-2, W-2)``."""
    if field.height < 3 or field.width < 3:
        raise DimensionError("jacobian_det needs height and width >= 3")
    jac = map_jacobian(field)[1:-1, 1:-1]
    return jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]


@dataclass(frozen=True)
class InversionInfo:
    residual: float
    converged: bool
    iterations: int
    method: str


def _fixed_point_step(u: np.ndarray, v: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -_sample_field(u, x + v[..., 0], y + v[..., 1])


def _newton_step(u: np.ndarray, du: np.ndarray, v: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # Solve q + u(q) = p for q = p + v.
    qx, qy = x + v[..., 0], y + v[..., 1]
    r = v + _sample_field(u, qx, qy)
    a, b, c, d = (_sample(du[..., i, k], qx, qy) + (i == k) for i in range(2) for k in range(2))
    det = a * d - b * c
    det = np.where(np.abs(det) < 1e-6, 1e-6, det)
    step_x = (d * r[..., 0] - b * r[..., 1]) / det
    step_y = (-c * r[..., 0] + a * r[..., 1]) / det
    return v - np.stack([step_x, step_y], axis=-1)


def invert(
    field: WarpField,
    iterations: int = 20,
    tolerance: float = 0.01,
    method: str = "auto",
    margin: Optional[int] = None,
    full_output: bool = False,
):
    """Inverse field by fixed-point iteration ``v <- -W(p + v)`` from ``v = 0``.

    Plain fixed-point iteration only contracts when the displacement's
    Lipschitz constant is below one, which fails for rotations beyond 60
    degrees.  With ``method="auto"`` a non-converged run continues from its
    best iterate with a Jacobian-preconditioned (Newton) update;
    ``"fixed_point"`` and ``"newton"`` force one scheme.

    Convergence and the residual ``max |compose(field, v)|`` are measured over
    :func:`interior_mask` with the given ``margin``.  Returns the inverse field,
    or ``(field, InversionInfo)`` when ``full_output`` is set.
    """
    if method not in ("auto", "fixed_point", "newton"):
        raise ParameterError(f"unknown inversion method {method!r}")
    u = field.displacement
    x, y = pixel_grid(*field.shape)
    inner = interior_mask(field.shape, margin)

    def residual(v):
        # Both v(p) + W(p + v(p)) and W(p) + v(p + W(p)) must vanish: the first
        # alone admits spurious fixed points where p + v leaves the grid.
        right = v + _sample_field(u, x + v[..., 0], y + v[..., 1])
        left = u + _sample_field(v, x + u[..., 0], y + u[..., 1])
        mag = np.maximum(np.hypot(right[..., 0], right[..., 1]), np.hypot(left[..., 0], left[..., 1]))
        return float(np.max(mag[inner])) if inner.any() else 0.0

    zero = np.zeros_like(u)
    best, best_res = zero, residual(zero)
    converged = best_res < tolerance
    used, last = 0, "none"
    schemes = {"auto": ("fixed_point", "newton"), "fixed_point": ("fixed_point",), "newton": ("newton",)}[method]
    for scheme in schemes:
        if converged:
            break
        v = zero
        if scheme == "newton":
            du = map_jacobian(field) - np.eye(2)
        for _ in range(iterations):
            new = _fixed_point_step(u, v, x, y) if scheme == "fixed_point" else _newton_step(u, du, v, x, y)
            used += 1
            update = np.hypot(new[..., 0] - v[..., 0], new[..., 1] - v[..., 1])
            v = new
            res = residual(v)
            if res < best_res:
                best, best_res = v, res
            if np.max(update[inner], initial=0.0) < tolerance:
                break
        last = scheme
        # Interpolation error of the composed check is O(tolerance) for smooth fields.
        converged = best_res < 25 * tolerance
    out = WarpField(best)
    if full_output:
        return out, InversionInfo(best_res, converged, used, last)
    return out


def sample_diffeo(seed, config: AugmentationConfig = None, size: Optional[int] = None) -> DiffeoSpec:
    """Draw one legal :class:`DiffeoSpec`.

    ``seed`` is an int or a ``numpy.random.Generator``.  Stretch factors are
    log-uniform over the configured range; stretch directions are uniform on
    the circle.  The centre is the patch centre.
    """
    config = config or AugmentationConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    names = [k for k, w in config.kinds.items() if w > 0]
    if not names:
        raise ConfigError("augmentation config has no kind with positive weight")
    weights = np.array([config.kinds[k] for k in names], dtype=float)
    kind = names[rng.choice(len(names), p=weights / weights.sum())]

    size = size or config.patch_size
    c = (size - 1) / 2.0
    center = (c, c)
    lo, hi = config.angle_range
    s_lo, s_hi = config.stretch_range
    phi = rng.uniform(-math.pi, math.pi)
    direction = (math.cos(phi), math.sin(phi))

    def factor():
        return float(math.exp(rng.uniform(math.log(s_lo), math.log(s_hi))))

    if kind == "rotation":
        angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        if angle <= -math.pi:
            angle = math.pi
        return DiffeoSpec("rotation", center, angle=angle)
    if kind == "partial_stretch":
        r = float(rng.uniform(*config.radius_fraction)) * size
        offset = rng.uniform(0.0, 0.5 * r)
        theta = rng.uniform(-math.pi, math.pi)
        region = (c + offset * math.cos(theta), c + offset * math.sin(theta))
        spec = DiffeoSpec(
            "partial_stretch", center, factor=factor(), direction=direction,
            region_center=region, radius=r, blend_width=config.blend_fraction * r,
        )
    else:
        spec = DiffeoSpec(kind, center, factor=factor(), direction=direction)
    spec.validate(config.stretch_range)
    return spec


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def save_warp(path: Union[str, Path], field: WarpField, metadata: Optional[Mapping] = None) -> None:
    """Write ``field`` as a binary container plus a ``.json`` metadata sidecar."""
    path = Path(path)
    header = _WARP_MAGIC + struct.pack("<III", _WARP_VERSION, field.height, field.width)
    data = np.ascontiguousarray(field.displacement, dtype="<f4").tobytes()
    path.write_bytes(header + data)
    path.with_suffix(".json").write_text(json.dumps(dict(metadata or {}), indent=2, sort_keys=True))


def load_warp(path: Union[str, Path]) -> Tuple[WarpField, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != _WARP_MAGIC:
        raise FormatError(f"{path} is not a warp field container")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != _WARP_VERSION:
        raise FormatError(f"unsupported warp container version {version}")
    body = raw[16:]
    if len(body) != h * w * 2 * 4:
        raise FormatError(f"{path}: payload size does not match {h}x{w}")
    disp = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return WarpField(disp), meta

"""Empirical checks of the sampling-density bound on latent matching error.

The bound says that if the sampled deformations cover the group to radius
``eps`` and the encoder is ``L``-Lipschitz, a new cell lands within roughly
``L * eps * ||s_j||`` of its matched bank record in latent space.  Nothing
here proves it; the harness measures each ingredient and reports how often
the fitted bound holds and whether errors shrink as the sample densifies.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import stats

from .diffeo_gen import AugmentationConfig, DiffeoSpec, make_warp
from .errors import ParameterError
from .invariant_net import EncoderModel, _bank_embeddings
from .nn_ops import patches_to_tensor
from .patch_bank import AugmentedRecord, BankEntry, CellBank, CellPatch

# --------------------------------------------------------------------------
# Parameter-space metric
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamMetric:
    """Weighted parameter distance between diffeomorphisms.

    Rotations are compared on the circle, stretch factors in log space, and
    stretch directions as axes (``phi`` and ``phi + pi`` coincide).  Each
    distance is divided by its scale; the defaults make every parameter's
    legal range unit length.  Direction and region parameters are weighted
    by ``|log s|`` so every kind's identity element is a single point.
    Deformations of different kinds are compared through the identity,
    ``d(g, h) = d(g, id) + d(id, h)``, which keeps the triangle inequality.
    """

    angle_scale: float = 2 * math.pi
    log_stretch_scale: float = math.log(1.4 / 0.7)
    position_scale: float = 32.0

    @classmethod
    def for_config(cls, config: AugmentationConfig) -> "ParamMetric":
        lo, hi = config.stretch_range
        return cls(log_stretch_scale=math.log(hi / lo) if hi > lo else 1.0, position_scale=float(config.patch_size))

    def features(self, spec: DiffeoSpec) -> np.ndarray:
        """Euclidean coordinates for the non-rotation kinds (the rotation angle for rotations)."""
        if spec.kind == "rotation":
            return np.array([spec.angle])
        ls = math.log(spec.factor) / self.log_stretch_scale
        if spec.kind == "uniform_stretch":
            return np.array([ls])
        phi = 2.0 * math.atan2(spec.direction[1], spec.direction[0])
        out = [ls * math.cos(phi), ls * math.sin(phi)]
        if spec.kind == "partial_stretch":
            w = abs(ls) / self.position_scale
            out += [w * (spec.region_center[0] - spec.center[0]), w * (spec.region_center[1] - spec.center[1]),
                    w * spec.radius]
        return np.array(out)

    def to_identity(self, spec: DiffeoSpec) -> float:
        f = self.features(spec)
        if spec.kind == "rotation":
            return abs(_wrap(f[0])) / self.angle_scale
        return float(np.linalg.norm(f))

    def __call__(self, a: DiffeoSpec, b: DiffeoSpec) -> float:
        return float(self.pairwise([a], [b])[0, 0])

    def pairwise(self, a: Sequence[DiffeoSpec], b: Sequence[DiffeoSpec]) -> np.ndarray:
        """``(len(a), len(b))`` distance matrix."""
        out = np.empty((len(a), len(b)))
        ka = np.array([s.kind for s in a])
        kb = np.array([s.kind for s in b])
        ida = np.array([self.to_identity(s) for s in a])
        idb = np.array([self.to_identity(s) for s in b])
        out[:] = ida[:, None] + idb[None, :]
        for kind in set(ka) & set(kb):
            ia, ib = np.flatnonzero(ka == kind), np.flatnonzero(kb == kind)
            fa = np.stack([self.features(a[i]) for i in ia])
            fb = np.stack([self.features(b[i]) for i in ib])
            if kind == "rotation":
                d = np.abs(_wrap(fa[:, None, 0] - fb[None, :, 0])) / self.angle_scale
            else:
                d = np.linalg.norm(fa[:, None, :] - fb[None, :, :], axis=-1)
            out[np.ix_(ia, ib)] = d
        return out


def _wrap(theta):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(theta) + math.pi, 2 * math.pi) - math.pi


@dataclass
class GroupSample:
    """A finite set of deformations together with the metric used to measure it."""

    specs: List[DiffeoSpec]
    metric: ParamMetric = field(default_factory=ParamMetric)

    def __len__(self):
        return len(self.specs)

    def distances(self, others: Sequence[DiffeoSpec]) -> np.ndarray:
        return self.metric.pairwise(list(others), self.specs)


# --------------------------------------------------------------------------
# Covering radius
# --------------------------------------------------------------------------


def reference_domain(config: AugmentationConfig, density: int = 32, cap: int = 100_000,
                     seed: int = 0) -> List[DiffeoSpec]:
    """A dense sample of the legal parameter box of every kind with positive weight.

    Each kind gets a grid of ``density`` points per parameter dimension; a
    kind whose grid would push the total past ``cap`` is sampled uniformly at
    random instead, with its share of the cap.
    """
    kinds = [k for k, w in config.kinds.items() if w > 0]
    if not kinds:
        raise ParameterError("augmentation config has no kind with positive weight")
    size = config.patch_size
    c = (size - 1) / 2.0
    lo, hi = config.angle_range
    ls = np.linspace(math.log(config.stretch_range[0]), math.log(config.stretch_range[1]), density)
    phis = np.linspace(-math.pi / 2, math.pi / 2, density, endpoint=False)
    share = cap // len(kinds)
    rng = np.random.default_rng(seed)
    out: List[DiffeoSpec] = []
    for kind in kinds:
        if kind == "rotation":
            angles = np.linspace(lo, hi, density + 1)[1:] if hi > lo else np.array([lo])
            out += [DiffeoSpec("rotation", (c, c), angle=float(a)) for a in angles]
        elif kind == "uniform_stretch":
            out += [DiffeoSpec(kind, (c, c), factor=float(math.exp(v))) for v in ls]
        elif kind in ("directional_stretch", "volume_preserving_stretch"):
            out += [DiffeoSpec(kind, (c, c), factor=float(math.exp(v)), direction=(math.cos(p), math.sin(p)))
                    for v, p in itertools.product(ls, phis)]
        else:
            n = min(share, density ** 5)
            r_lo, r_hi = config.radius_fraction
            for _ in range(n):
                r = rng.uniform(r_lo, r_hi) * size
                off, th = rng.uniform(0.0, 0.5 * r), rng.uniform(-math.pi, math.pi)
                p = rng.uniform(-math.pi / 2, math.pi / 2)
                out.append(DiffeoSpec(kind, (c, c), factor=float(math.exp(rng.uniform(ls[0], ls[-1]))),
                                      direction=(math.cos(p), math.sin(p)),
                                      region_center=(c + off * math.cos(th), c + off * math.sin(th)),
                                      radius=r, blend_width=config.blend_fraction * r))
    return out[:cap]


def covering_radius(candidates: GroupSample, reference: Sequence[DiffeoSpec], chunk: int = 4096) -> float:
    """Largest distance from a reference point to its nearest candidate."""
    if len(candidates) == 0:
        raise ParameterError("covering radius of an empty candidate set is undefined")
    reference = list(reference)
    if not reference:
        return 0.0
    worst = 0.0
    for k in range(0, len(reference), chunk):
        d = candidates.distances(reference[k:k + chunk])
        worst = max(worst, float(d.min(axis=1).max()))
    return worst


def nested_rotations(m: int, seed: int = 0, size: int = 32) -> List[DiffeoSpec]:
    """``m`` evenly spaced rotations with a seeded phase.

    For a fixed seed the sets are nested when ``m`` doubles, so densifying the
    sample can only bring each query closer to its nearest record.
    """
    if m < 1:
        raise ParameterError("m must be >= 1")
    c = (size - 1) / 2.0
    phase = np.random.default_rng(seed).uniform(0.0, 2 * math.pi)
    angles = _wrap(phase + 2 * math.pi * np.arange(m) / m)
    angles[angles <= -math.pi] = math.pi
    return [DiffeoSpec("rotation", (c, c), angle=float(a)) for a in angles]


def bank_from_specs(entries: Sequence[BankEntry], specs: Sequence[DiffeoSpec]) -> CellBank:
    """A bank whose every archetype is augmented by exactly ``specs``."""
    records = []
    for j, e in enumerate(entries):
        for i, spec in enumerate(specs):
            f = make_warp(spec, *e.patch.shape)
            records.append(AugmentedRecord(j, i, spec, e.patch.warped(f), e.labels.warped(f)))
    return CellBank(list(entries), len(specs), records)


# --------------------------------------------------------------------------
# Lipschitz estimates
# --------------------------------------------------------------------------


def _as_torch_fn(encoder) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(encoder, EncoderModel):
        return encoder.torch_encoder()
    if isinstance(encoder, torch.nn.Module) or callable(encoder):
        return encoder
    raise ParameterError("encoder must be an EncoderModel, a torch module or a callable")


def _as_array(x) -> np.ndarray:
    a = x.intensities if isinstance(x, CellPatch) else np.asarray(x, np.float64)
    return a


def _batch(arrays: Sequence[np.ndarray]) -> torch.Tensor:
    arr = [a if a.ndim == 3 else a[..., None] for a in arrays]
    return patches_to_tensor(arr).double()


def _encode(fn, arrays: Sequence[np.ndarray]) -> np.ndarray:
    with torch.no_grad():
        return fn(_batch(arrays)).double().numpy().reshape(len(arrays), -1)


def lipschitz_estimate(encoder, probes: Sequence, mode: str = "pairwise-ratio", iterations: int = 50,
                       seed: int = 0) -> float:
    """A lower bound on the encoder's Lipschitz constant (pixel L2 to latent L2).

    ``pairwise-ratio`` takes ``(a, b)`` pairs and returns the largest
    ``||f(a) - f(b)|| / ||a - b||``; coincident pairs are skipped with a
    warning.  ``jacobian-power-iteration`` takes single inputs (or uses the
    first element of each pair) and returns the largest input-Jacobian
    spectral norm, found by power iteration on ``J^T J``.
    """
    fn = _as_torch_fn(encoder)
    if isinstance(encoder, torch.nn.Module):
        encoder = encoder.double()
    elif isinstance(encoder, EncoderModel):
        encoder.net.double()
    try:
        if mode == "pairwise-ratio":
            return _pairwise(fn, probes)
        if mode == "jacobian-power-iteration":
            return _power(fn, probes, iterations, seed)
        raise ParameterError(f"unknown Lipschitz mode {mode!r}")
    finally:
        if isinstance(encoder, EncoderModel):
            encoder.net.float()


def _pairwise(fn, probes) -> float:
    best, skipped = 0.0, 0
    for a, b in probes:
        a, b = _as_array(a), _as_array(b)
        gap = float(np.linalg.norm(a - b))
        if gap < 1e-12:
            skipped += 1
            continue
        za, zb = _encode(fn, [a, b])
        best = max(best, float(np.linalg.norm(za - zb)) / gap)
    if skipped:
        warnings.warn(f"skipped {skipped} coincident probe pair(s)", RuntimeWarning, stacklevel=3)
    return best


def _power(fn, probes, iterations: int, seed: int) -> float:
    gen = torch.Generator().manual_seed(seed)
    best = 0.0
    for p in probes:
        x0 = _batch([_as_array(p[0] if isinstance(p, tuple) else p)])
        v = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        v = v / v.norm()
        sigma = 0.0
        for _ in range(iterations):
            _, jv = torch.autograd.functional.jvp(fn, x0, v)
            _, jtjv = torch.autograd.functional.vjp(fn, x0, jv)
            norm = float(jtjv.norm())
            if norm < 1e-300:
                sigma = 0.0
                break
            v = jtjv / norm
            sigma = math.sqrt(norm)
        best = max(best, sigma)
    return best


# --------------------------------------------------------------------------
# Bound verification
# --------------------------------------------------------------------------


@dataclass
class BoundReport:
    epsilon_star: float
    L_hat: float
    c_fit: float
    holds_fraction: float
    errors: List[float] = field(default_factory=list)
    slack: List[float] = field(default_factory=list)
    per_m: List[Dict[str, float]] = field(default_factory=list)
    spearman: Optional[float] = None
    monotone: Optional[bool] = None
    trained: bool = True
    flags: List[str] = field(default_factory=list)

    def summary(self) -> dict:
        """The JSON-facing fields, without per-query lists."""
        d = {k: v for k, v in asdict(self).items() if k not in ("errors", "slack")}
        d["L_hat_is_lower_bound"] = True
        return d

    def to_json(self, per_query: bool = False) -> str:
        d = asdict(self) if per_query else self.summary()
        if per_query:
            d["L_hat_is_lower_bound"] = True
        return json.dumps(_finite(d), indent=2, sort_keys=True)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def _is_trained(encoder) -> bool:
    if isinstance(encoder, EncoderModel):
        return int(encoder.fingerprint.get("epochs", 0)) > 0
    return True


def matching_errors(encoder: EncoderModel, bank: CellBank, queries: Sequence[CellPatch]) -> np.ndarray:
    """Latent distance from each query to its nearest bank record."""
    e = _bank_embeddings(encoder, bank).astype(np.float64)
    q = encoder.encode(queries).astype(np.float64)
    return np.linalg.norm(q[:, None, :] - e[None, :, :], axis=-1).min(axis=1)


def verify_bound(encoder: EncoderModel, bank: CellBank, queries: Sequence[Tuple[CellPatch, int]],
                 metric: Optional[ParamMetric] = None, reference: Optional[Sequence[DiffeoSpec]] = None,
                 L_hat: Optional[float] = None, calibration_fraction: float = 0.5, seed: int = 0) -> BoundReport:
    """Check ``||Phi(q) - Phi(match)|| <= L eps ||s_j|| + c ||q||^2`` on held-out queries.

    ``queries`` pairs each deformed cell with the index of its archetype.
    ``c`` is the smallest constant that makes the bound hold on a random
    calibration split; ``holds_fraction`` is measured on the rest.  Without
    ``L_hat``, it is the pairwise-ratio estimate over (query, nearest
    same-archetype record) pairs.
    """
    if not queries:
        raise ParameterError("need at least one query")
    config = bank.config or AugmentationConfig(patch_size=bank.patch_size)
    metric = metric or ParamMetric.for_config(config)
    sample = GroupSample(bank.specs()[:bank.augmentations_per_entry], metric)
    reference = reference if reference is not None else reference_domain(config, seed=seed)
    eps = covering_radius(sample, reference)
    patches = [q for q, _ in queries]
    archetype = np.array([j for _, j in queries])
    errors = matching_errors(encoder, bank, patches)
    records = bank.records()
    if L_hat is None:
        emb = _bank_embeddings(encoder, bank)
        q_emb = encoder.encode(patches)
        pairs = []
        for n, (p, j) in enumerate(queries):
            same = [k for k, r in enumerate(records) if r.entry == j]
            k = same[int(np.argmin(np.linalg.norm(emb[same] - q_emb[n], axis=1)))]
            pairs.append((p, records[k].patch))
        L_hat = lipschitz_estimate(encoder, pairs)
    s_norm = np.array([np.linalg.norm(bank.entries[j].patch.intensities) for j in archetype])
    q_norm2 = np.array([float(np.sum(p.intensities.astype(np.float64) ** 2)) for p in patches])
    main = L_hat * eps * s_norm
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(queries))
    n_cal = int(round(calibration_fraction * len(queries)))
    cal, test = order[:n_cal], order[n_cal:]
    if len(test) == 0:
        test = order
    c = float(max(0.0, np.max((errors[cal] - main[cal]) / q_norm2[cal]))) if len(cal) else 0.0
    bound = main + c * q_norm2
    report = BoundReport(eps, float(L_hat), c, float(np.mean(errors[test] <= bound[test] + 1e-12)),
                         errors.tolist(), (bound - errors).tolist(), trained=_is_trained(encoder))
    if not report.trained:
        warnings.warn("encoder looks untrained; the bound is reported but means little", RuntimeWarning, stacklevel=2)
        report.flags.append("untrained-encoder")
    return report


def density_study(encoder: EncoderModel, entries: Sequence[BankEntry], queries: Sequence[Tuple[CellPatch, int]],
                  ms: Sequence[int] = (2, 4, 8, 16), seed: int = 0, metric: Optional[ParamMetric] = None,
                  calibration_fraction: float = 0.5) -> BoundReport:
    """Verify the bound on rotation banks of growing density ``ms`` (nested for a fixed seed).

    Top-level fields describe the densest bank; ``per_m`` records every
    density.  ``monotone`` says whether the median error never increases
    as ``m`` grows, ``spearman`` is the rank correlation between covering
    radius and median error.
    """
    if not entries:
        raise ParameterError("need at least one archetype")
    size = entries[0].patch.size
    config = AugmentationConfig(kinds={"rotation": 1.0}, patch_size=size)
    metric = metric or ParamMetric.for_config(config)
    reference = reference_domain(config, density=max(32, 8 * max(ms)))
    per_m, last = [], None
    for m in sorted(ms):
        bank = bank_from_specs(entries, nested_rotations(m, seed, size))
        bank.config = config
        rep = verify_bound(encoder, bank, queries, metric, reference, calibration_fraction=calibration_fraction,
                           seed=seed)
        per_m.append({"m": m, "epsilon_star": rep.epsilon_star, "median_error": float(np.median(rep.errors)),
                      "holds_fraction": rep.holds_fraction, "c_fit": rep.c_fit, "L_hat": rep.L_hat})
        last = rep
    last.per_m = per_m
    eps = [p["epsilon_star"] for p in per_m]
    med = [p["median_error"] for p in per_m]
    last.monotone = bool(all(b <= a + 1e-12 for a, b in zip(med, med[1:])))
    last.spearman = spearman(eps, med)
    if not all(b < a for a, b in zip(eps, eps[1:])):
        last.flags.append("covering-radius-not-decreasing")
    if not last.monotone:
        last.flags.append("error-not-monotone")
    return last


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation; NaN when either side is constant."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


def rotation_queries(entries: Sequence[BankEntry], n: int, seed: int = 0) -> List[Tuple[CellPatch, int]]:
    """Each archetype rotated by fresh uniform angles (almost surely outside any finite sample)."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        j = k % len(entries)
        e = entries[j]
        c = (e.patch.size - 1) / 2.0
        spec = DiffeoSpec("rotation", (c, c), angle=float(rng.uniform(-math.pi, math.pi)))
        out.append((e.patch.warped(make_warp(spec, *e.patch.shape)), j))
    return out
